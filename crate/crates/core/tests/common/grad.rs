//! Central finite-difference oracle for reverse-mode gradients, plus tiny
//! models and samples to run it on.

use candle_core::{Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mixhic::encoders::EncoderConfig;
use mixhic::genomic_io::GenomicInterval;
use mixhic::model::ModelConfig;
use mixhic::nn::{device, scalar};
use mixhic::preprocessing::{ContactMapWindow, SamplePair, SampleTarget, TrackWindow};
use mixhic::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale: the
/// round-off of a central difference is about `eps |f| / STEP`.
pub const FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_relative_error: self.max_relative_error.max(other.max_relative_error),
            coordinates: self.coordinates + other.coordinates,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `loss`'s backward pass against central differences on up to
/// `per_var` random coordinates of every variable.
pub fn check_gradients(vars: &[&Var], loss: impl Fn() -> Result<Tensor>, per_var: usize, seed: u64) -> Result<GradCheck> {
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::default();
    for var in vars {
        let shape = var.as_tensor().shape().clone();
        let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        let picks = sample(&mut rng, base.len(), per_var.min(base.len()));
        for i in picks {
            let mut probe = base.clone();
            probe[i] = base[i] + STEP;
            var.set(&Tensor::from_vec(probe.clone(), shape.clone(), &device())?)?;
            let up = scalar(&loss()?)?;
            probe[i] = base[i] - STEP;
            var.set(&Tensor::from_vec(probe, shape.clone(), &device())?)?;
            let down = scalar(&loss()?)?;
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), &device())?)?;
            let numeric = (up - down) / (2.0 * STEP);
            out.max_relative_error = out.max_relative_error.max(relative_error(analytic[i], numeric));
            out.coordinates += 1;
        }
    }
    Ok(out)
}

pub fn random_var(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Var> {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(v, shape, &device())?)?)
}

/// 8-bin windows, 8 features, one block per stage.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            window: 8,
            patch: 2,
            dim: 8,
            blocks: 1,
            track_length: 32,
            track_channels: 2,
            track_tokens: 16,
            heads: 2,
            dropout: 0.0,
            conv_kernel: 3,
            pool_factors: vec![2],
        },
        ..ModelConfig::default()
    }
}

pub fn tiny_sample(seed: u64, target: SampleTarget) -> SamplePair {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let iv = GenomicInterval::new("chr1", 0, 8000).expect("valid interval");
    SamplePair {
        contact: ContactMapWindow {
            values: (0..64).map(|_| rng.gen_range(0.0..3.0)).collect(),
            size: 8,
            origin_x: iv.clone(),
            origin_y: iv,
            resolution_bp: 1000,
        },
        track: TrackWindow {
            values: (0..64).map(|_| rng.gen_range(0.0..2.0)).collect(),
            length: 32,
            channels: 2,
        },
        target,
    }
}

use mixhic::crossmodal::{contrastive_loss, mapping_loss, orthogonal_loss, OrthogonalMode, DEFAULT_TEMPERATURE};
use mixhic::model::{Batch, InputMode, MixHic, Task};
use mixhic::nn::Ctx;

pub fn contrastive_case(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (random_var(&mut rng, &[6, 5])?, random_var(&mut rng, &[6, 5])?);
    check_gradients(
        &[&a, &b],
        || contrastive_loss(a.as_tensor(), b.as_tensor(), DEFAULT_TEMPERATURE, true),
        30,
        seed,
    )
}

pub fn orthogonal_case(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<Var> = (0..4).map(|_| random_var(&mut rng, &[5, 4])).collect::<Result<_>>()?;
    check_gradients(
        &v.iter().collect::<Vec<_>>(),
        || {
            orthogonal_loss(
                v[0].as_tensor(),
                v[1].as_tensor(),
                v[2].as_tensor(),
                v[3].as_tensor(),
                OrthogonalMode::Squared,
            )
        },
        20,
        seed,
    )
}

pub fn mapping_case(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<Var> = (0..4).map(|_| random_var(&mut rng, &[3, 4, 6])).collect::<Result<_>>()?;
    check_gradients(
        &v.iter().collect::<Vec<_>>(),
        || mapping_loss(v[0].as_tensor(), v[1].as_tensor(), v[2].as_tensor(), v[3].as_tensor()),
        20,
        seed,
    )
}

fn target_of(task: Task, k: u64) -> SampleTarget {
    match task {
        Task::None => SampleTarget::None,
        Task::Loop => SampleTarget::LoopLabel((k % 2) as u8),
        Task::Cage => SampleTarget::Cage((0..16).map(|i| ((i as u64 + k) % 5) as f64 * 0.3).collect()),
        Task::Contact => SampleTarget::Contact((0..64).map(|i| ((i as u64 * 7 + k) % 11) as f64 * 0.2).collect()),
    }
}

/// Every parameter of a tiny model against the task loss (or the pretraining
/// objective for `Task::None`) on a batch of three samples.
pub fn model_case(task: Task, mode: InputMode, seed: u64) -> Result<GradCheck> {
    let model = MixHic::new(&tiny_config(), task, seed)?;
    let samples: Vec<SamplePair> = (0..3).map(|k| tiny_sample(seed * 10 + k, target_of(task, k))).collect();
    let refs: Vec<&SamplePair> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, task)?;
    let vars: Vec<&Var> = model.params.iter().map(|(_, v)| v).collect();
    let ctx = Ctx::eval();
    check_gradients(
        &vars,
        || match task {
            Task::None => Ok(model.pretrain_loss(&batch, &ctx)?.0),
            _ => model.task_loss(&batch, mode, &ctx),
        },
        2,
        seed,
    )
}

/// Named cases of the whole gradient suite.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    Ok(vec![
        ("contrastive", contrastive_case(seed)?),
        ("orthogonal", orthogonal_case(seed)?),
        ("mapping", mapping_case(seed)?),
        ("pretraining objective", model_case(Task::None, InputMode::Bimodal, seed)?),
        ("loop bce bimodal", model_case(Task::Loop, InputMode::Bimodal, seed)?),
        ("loop bce infer", model_case(Task::Loop, InputMode::InferMissingHic, seed)?),
        ("cage mse bimodal", model_case(Task::Cage, InputMode::Bimodal, seed)?),
        ("contact mse infer", model_case(Task::Contact, InputMode::InferMissingHic, seed)?),
    ])
}

/// Random inputs shaped for `config`.
pub fn sample_for(config: &ModelConfig, seed: u64, target: SampleTarget) -> SamplePair {
    use rand::Rng;
    let enc = &config.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let iv = GenomicInterval::new("chr1", 0, enc.window as u64 * 1000).expect("valid interval");
    SamplePair {
        contact: ContactMapWindow {
            values: (0..enc.window * enc.window).map(|_| rng.gen_range(0.0..3.0)).collect(),
            size: enc.window,
            origin_x: iv.clone(),
            origin_y: iv,
            resolution_bp: 1000,
        },
        track: TrackWindow {
            values: (0..enc.track_length * enc.track_channels).map(|_| rng.gen_range(0.0..2.0)).collect(),
            length: enc.track_length,
            channels: enc.track_channels,
        },
        target,
    }
}
