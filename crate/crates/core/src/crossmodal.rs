//! Cross-modal interaction (invariant/specific projections with contrastive
//! and orthogonality losses) and cross-modal mapping (adaptive pooling plus a
//! dense map between the two bottleneck sequences).

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{self, device, Init, Linear, DTYPE};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthogonalMode {
    /// Mean squared cosine between specific and invariant pooled features.
    Squared,
    /// Mean raw inner product, no normalisation and no squaring.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    /// L2-normalise pooled features before the contrastive similarities.
    pub normalize: bool,
    pub orthogonal: OrthogonalMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            normalize: true,
            orthogonal: OrthogonalMode::Squared,
        }
    }
}

/// Invariant/specific projections of one modality's bottleneck.
#[derive(Debug, Clone)]
pub struct ModalityProjection {
    /// `(B, S, C_2)`
    pub invariant: Tensor,
    pub specific: Tensor,
    /// Sequence means, `(B, C_2)`.
    pub pooled_invariant: Tensor,
    pub pooled_specific: Tensor,
    /// `[invariant : specific]`, `(B, S, C_3)`.
    pub concat: Tensor,
}

#[derive(Debug, Clone)]
pub struct InteractionBlock {
    hic_invariant: Linear,
    hic_specific: Linear,
    epi_invariant: Linear,
    epi_specific: Linear,
}

impl InteractionBlock {
    pub fn new(init: &mut Init, bottleneck_dim: usize) -> Result<Self> {
        ensure!(bottleneck_dim.is_multiple_of(2), "bottleneck dim {bottleneck_dim} must be even");
        let half = bottleneck_dim / 2;
        Ok(Self {
            hic_invariant: Linear::new(&mut init.sub("hic_invariant"), bottleneck_dim, half, true)?,
            hic_specific: Linear::new(&mut init.sub("hic_specific"), bottleneck_dim, half, true)?,
            epi_invariant: Linear::new(&mut init.sub("epi_invariant"), bottleneck_dim, half, true)?,
            epi_specific: Linear::new(&mut init.sub("epi_specific"), bottleneck_dim, half, true)?,
        })
    }

    pub fn project_hic(&self, bottleneck: &Tensor) -> Result<ModalityProjection> {
        project(&self.hic_invariant, &self.hic_specific, bottleneck)
    }

    pub fn project_epi(&self, bottleneck: &Tensor) -> Result<ModalityProjection> {
        project(&self.epi_invariant, &self.epi_specific, bottleneck)
    }
}

fn project(inv: &Linear, spec: &Linear, x: &Tensor) -> Result<ModalityProjection> {
    let (_, _, d) = x.dims3()?;
    ensure!(
        d == inv.input_dim(),
        "bottleneck dim {d} does not match projection input {}",
        inv.input_dim()
    );
    let invariant = inv.forward(x)?;
    let specific = spec.forward(x)?;
    Ok(ModalityProjection {
        pooled_invariant: invariant.mean(1)?,
        pooled_specific: specific.mean(1)?,
        concat: Tensor::cat(&[&invariant, &specific], D::Minus1)?,
        invariant,
        specific,
    })
}

/// Index range averaged by output position `k` when pooling `n -> m`:
/// `[floor(k n / m), ceil((k + 1) n / m))`.
pub fn adaptive_pool_range(k: usize, n: usize, m: usize) -> (usize, usize) {
    ((k * n) / m, ((k + 1) * n).div_ceil(m))
}

/// `(m, n)` averaging matrix of 1D adaptive average pooling.
pub fn adaptive_pool_matrix(n: usize, m: usize) -> Result<Tensor> {
    ensure!(n >= 1 && m >= 1, "pooling lengths must be positive");
    let mut w = vec![0.0; m * n];
    for k in 0..m {
        let (lo, hi) = adaptive_pool_range(k, n, m);
        let share = 1.0 / (hi - lo) as f64;
        for i in lo..hi {
            w[k * n + i] = share;
        }
    }
    Ok(Tensor::from_vec(w, (m, n), &device())?)
}

/// Pools `(B, n, C)` along the sequence axis to `(B, m, C)`.
pub fn adaptive_avg_pool(x: &Tensor, m: usize) -> Result<Tensor> {
    let (_, n, _) = x.dims3()?;
    if n == m {
        return Ok(x.clone());
    }
    let p = adaptive_pool_matrix(n, m)?;
    Ok(p.broadcast_matmul(x)?)
}

#[derive(Debug, Clone)]
pub struct MappingBlock {
    hic_to_epi: Linear,
    epi_to_hic: Linear,
}

impl MappingBlock {
    pub fn new(init: &mut Init, bottleneck_dim: usize) -> Result<Self> {
        Ok(Self {
            hic_to_epi: Linear::new(&mut init.sub("hic_to_epi"), bottleneck_dim, bottleneck_dim, true)?,
            epi_to_hic: Linear::new(&mut init.sub("epi_to_hic"), bottleneck_dim, bottleneck_dim, true)?,
        })
    }

    /// `X_M2E`: contact-map concat pooled to the track length, then mapped.
    pub fn hic_to_epi(&self, hic_concat: &Tensor, track_len: usize) -> Result<Tensor> {
        self.hic_to_epi.forward(&adaptive_avg_pool(hic_concat, track_len)?)
    }

    /// `X_E2M`: track concat pooled to the contact-map length, then mapped.
    pub fn epi_to_hic(&self, epi_concat: &Tensor, hic_len: usize) -> Result<Tensor> {
        self.epi_to_hic.forward(&adaptive_avg_pool(epi_concat, hic_len)?)
    }

    /// Returns `(X_M2E, X_E2M)`.
    pub fn forward(&self, hic_concat: &Tensor, epi_concat: &Tensor) -> Result<(Tensor, Tensor)> {
        let (bh, hic_len, dh) = hic_concat.dims3()?;
        let (be, track_len, de) = epi_concat.dims3()?;
        ensure!(bh == be && dh == de, "concat shapes ({bh},{hic_len},{dh}) and ({be},{track_len},{de}) disagree");
        Ok((
            self.hic_to_epi(hic_concat, track_len)?,
            self.epi_to_hic(epi_concat, hic_len)?,
        ))
    }
}

/// Row-wise L2 normalisation of `(J, C)`; fails on a zero row.
pub fn l2_normalize_rows(x: &Tensor, what: &str) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norms.flatten_all()?.min(0)?.to_scalar::<f64>()?;
    if !(min > 1e-12) {
        return Err(Error::Normalization(what.to_string()));
    }
    Ok(x.broadcast_div(&norms)?)
}

/// InfoNCE over a batch: `-(1/J) Σ_j log softmax_r(<A_j, B_r>/τ)_j`.
pub fn contrastive_pair_loss(a: &Tensor, b: &Tensor, temperature: f64, normalize: bool) -> Result<Tensor> {
    let (j, c) = a.dims2()?;
    ensure!(b.dims2()? == (j, c), "contrastive inputs have shapes {:?} and {:?}", a.dims(), b.dims());
    ensure!(j >= 2, "contrastive loss needs a batch of at least 2, got {j}");
    ensure!(temperature > 0.0, "temperature must be positive");
    let (a, b) = if normalize {
        (l2_normalize_rows(a, "contrastive input")?, l2_normalize_rows(b, "contrastive input")?)
    } else {
        (a.clone(), b.clone())
    };
    let logits = (a.matmul(&b.t()?)? / temperature)?;
    let eye = Tensor::eye(j, DTYPE, &device())?;
    let positive = logits.mul(&eye)?.sum(D::Minus1)?;
    let lse = nn::logsumexp_last(&logits)?;
    Ok((lse - positive)?.mean_all()?)
}

/// Symmetric contrastive loss between pooled invariant features.
pub fn contrastive_loss(epi: &Tensor, hic: &Tensor, temperature: f64, normalize: bool) -> Result<Tensor> {
    let ab = contrastive_pair_loss(epi, hic, temperature, normalize)?;
    let ba = contrastive_pair_loss(hic, epi, temperature, normalize)?;
    Ok(((ab + ba)? * 0.5)?)
}

fn batch_inner(x: &Tensor, y: &Tensor, mode: OrthogonalMode) -> Result<Tensor> {
    ensure!(x.dims() == y.dims(), "orthogonal loss inputs have shapes {:?} and {:?}", x.dims(), y.dims());
    match mode {
        OrthogonalMode::Squared => {
            let xn = l2_normalize_rows(x, "orthogonal-loss input")?;
            let yn = l2_normalize_rows(y, "orthogonal-loss input")?;
            Ok(xn.mul(&yn)?.sum(D::Minus1)?.sqr()?.mean_all()?)
        }
        OrthogonalMode::Raw => Ok(x.mul(y)?.sum(D::Minus1)?.mean_all()?),
    }
}

/// `½ (<S_M, I_M>² + <S_E, I_E>²)` on normalised pooled features, batch mean.
pub fn orthogonal_loss(
    hic_specific: &Tensor,
    hic_invariant: &Tensor,
    epi_specific: &Tensor,
    epi_invariant: &Tensor,
    mode: OrthogonalMode,
) -> Result<Tensor> {
    let m = batch_inner(hic_specific, hic_invariant, mode)?;
    let e = batch_inner(epi_specific, epi_invariant, mode)?;
    Ok(((m + e)? * 0.5)?)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure!(a.dims() == b.dims(), "shape mismatch {:?} vs {:?}", a.dims(), b.dims());
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// `½ (mean (X_M2E - X_E^Concat)² + mean (X_E2M - X_M^Concat)²)`.
pub fn mapping_loss(hic_to_epi: &Tensor, epi_concat: &Tensor, epi_to_hic: &Tensor, hic_concat: &Tensor) -> Result<Tensor> {
    Ok(((mse(hic_to_epi, epi_concat)? + mse(epi_to_hic, hic_concat)?)? * 0.5)?)
}

/// Everything the pretraining objective needs from one forward pass.
#[derive(Debug, Clone)]
pub struct CrossModalEmbeddings {
    pub hic: ModalityProjection,
    pub epi: ModalityProjection,
    pub hic_to_epi: Tensor,
    pub epi_to_hic: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLossReport {
    pub l_con: f64,
    pub l_orth: f64,
    pub l_mapping: f64,
    pub l_pretrain: f64,
    pub batch: usize,
    pub temperature: f64,
}

impl PretrainLossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_con, self.l_orth, self.l_mapping, self.l_pretrain]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_con + L_orth + L_mapping`, equally weighted.
pub fn pretrain_loss(emb: &CrossModalEmbeddings, config: &LossConfig) -> Result<(Tensor, PretrainLossReport)> {
    let con = contrastive_loss(
        &emb.epi.pooled_invariant,
        &emb.hic.pooled_invariant,
        config.temperature,
        config.normalize,
    )?;
    let orth = orthogonal_loss(
        &emb.hic.pooled_specific,
        &emb.hic.pooled_invariant,
        &emb.epi.pooled_specific,
        &emb.epi.pooled_invariant,
        config.orthogonal,
    )?;
    let map = mapping_loss(&emb.hic_to_epi, &emb.epi.concat, &emb.epi_to_hic, &emb.hic.concat)?;
    let total = ((&con + &orth)? + &map)?;
    let (l_con, l_orth, l_mapping) = (nn::scalar(&con)?, nn::scalar(&orth)?, nn::scalar(&map)?);
    let report = PretrainLossReport {
        l_con,
        l_orth,
        l_mapping,
        l_pretrain: nn::scalar(&total)?,
        batch: emb.hic.pooled_invariant.dim(0)?,
        temperature: config.temperature,
    };
    Ok((total, report))
}

/// Mean absolute cosine between pooled specific and invariant features,
/// per modality: `(hic, epi)`.
pub fn specific_invariant_cosine(emb: &CrossModalEmbeddings) -> Result<(f64, f64)> {
    let cos = |s: &Tensor, i: &Tensor| -> Result<f64> {
        let s = l2_normalize_rows(s, "pooled specific features")?;
        let i = l2_normalize_rows(i, "pooled invariant features")?;
        nn::scalar(&s.mul(&i)?.sum(D::Minus1)?.abs()?.mean_all()?)
    };
    Ok((
        cos(&emb.hic.pooled_specific, &emb.hic.pooled_invariant)?,
        cos(&emb.epi.pooled_specific, &emb.epi.pooled_invariant)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::from_vec(rows.iter().flat_map(|r| r.to_vec()).collect::<Vec<_>>(), (rows.len(), c), &device())
            .unwrap()
    }

    fn val(x: Result<Tensor>) -> f64 {
        x.unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn identical_rows_give_log_j() {
        let a = t2(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert!((val(contrastive_pair_loss(&a, &a, 0.07, true)) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_rows_closed_form() {
        let a = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let got = val(contrastive_pair_loss(&a, &a, 0.07, true));
        let e = (1.0f64 / 0.07).exp();
        let want = -(e / (e + 1.0)).ln();
        assert!((got - want).abs() < 1e-15);
        // ≈ 6.249e-7
        assert!((got - 6.249e-7).abs() < 1e-10, "{got}");
    }

    #[test]
    fn pair_loss_errors() {
        let a = t2(&[&[1.0, 0.0]]);
        assert!(matches!(contrastive_pair_loss(&a, &a, 0.07, true), Err(Error::Validation(_))));
        let z = t2(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(contrastive_pair_loss(&z, &z, 0.07, true), Err(Error::Normalization(_))));
    }

    #[test]
    fn mismatched_batch_costs_more() {
        let e = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let aligned = val(contrastive_loss(&e, &e, 0.5, true));
        // sample 1's track features match sample 2's contact features
        let m = t2(&[&[0.2, 1.0], &[1.0, 0.2]]);
        let crossed = val(contrastive_loss(&e, &m, 0.5, true));
        assert!(crossed > aligned);
        let swapped = val(contrastive_loss(&m, &e, 0.5, true));
        assert!((crossed - swapped).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_loss_cases() {
        let x = t2(&[&[1.0, 0.0]]);
        let y = t2(&[&[0.0, 1.0]]);
        assert_eq!(val(orthogonal_loss(&x, &y, &x, &y, OrthogonalMode::Squared)), 0.0);
        assert!((val(orthogonal_loss(&x, &x, &y, &y, OrthogonalMode::Squared)) - 1.0).abs() < 1e-15);
        let half = t2(&[&[0.5, 3f64.sqrt() / 2.0]]);
        assert!((val(orthogonal_loss(&x, &half, &x, &half, OrthogonalMode::Squared)) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn adaptive_pool_rules() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], (1, 4, 1), &device()).unwrap();
        let y = adaptive_avg_pool(&x, 2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![1.5, 3.5]);
        assert!(adaptive_avg_pool(&x, 4).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap() == vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(adaptive_pool_range(0, 16, 13), (0, 2));
        assert_eq!(adaptive_pool_range(12, 16, 13), (14, 16));
        assert_eq!(adaptive_pool_range(0, 13, 16), (0, 1));
    }

    #[test]
    fn mapping_loss_cases() {
        let z = Tensor::zeros((2, 3, 4), DTYPE, &device()).unwrap();
        let o = Tensor::ones((2, 3, 4), DTYPE, &device()).unwrap();
        assert_eq!(val(mapping_loss(&z, &z, &z, &z)), 0.0);
        assert_eq!(val(mapping_loss(&o, &z, &o, &z)), 1.0);
        let eps = (&o * 0.25).unwrap();
        assert!((val(mapping_loss(&(&z + &eps).unwrap(), &z, &eps, &z)) - 0.0625).abs() < 1e-15);
    }
}
