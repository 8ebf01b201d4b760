//! The full two-encoder model with its pretraining and task forward passes.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crossmodal::{self, CrossModalEmbeddings, InteractionBlock, LossConfig, MappingBlock, PretrainLossReport};
use crate::encoders::{EncoderConfig, EpiEncoder, HicEncoder, StageOutputs, STAGES};
use crate::error::{ensure, Error, Result};
use crate::fusion_heads::{self, CageHead, ContactHead, Decoder, Fusion, HeadConfig, LoopHead};
use crate::nn::{self, device, Ctx, Init, ParamStore};
use crate::preprocessing::{SamplePair, SampleTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    None,
    Loop,
    Cage,
    Contact,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Task::None),
            "loop" => Ok(Task::Loop),
            "cage" => Ok(Task::Cage),
            "contact" => Ok(Task::Contact),
            other => Err(Error::validation(format!("unknown task {other:?} (expected loop, cage or contact)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::None => "none",
            Task::Loop => "loop",
            Task::Cage => "cage",
            Task::Contact => "contact",
        })
    }
}

/// Which stream supplies the keys/values of the fusion block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Contact-map embedding from the Hi-C encoder.
    Bimodal,
    /// Contact-map embedding imputed from the tracks through the mapping block.
    InferMissingHic,
    /// Track embedding only; the mapping block is not used.
    TrackOnly,
}

impl InputMode {
    pub fn needs_contacts(self) -> bool {
        self == InputMode::Bimodal
    }
}

impl FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "bimodal" => Ok(InputMode::Bimodal),
            "infer_missing_hic" | "infer" => Ok(InputMode::InferMissingHic),
            "track_only" => Ok(InputMode::TrackOnly),
            other => Err(Error::validation(format!(
                "unknown input mode {other:?} (expected bimodal, infer-missing-hic or track-only)"
            ))),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Bimodal => "bimodal",
            InputMode::InferMissingHic => "infer_missing_hic",
            InputMode::TrackOnly => "track_only",
        })
    }
}

/// Rejects task/input combinations that feed the target back as input.
pub fn check_leakage(task: Task, mode: InputMode) -> Result<()> {
    if task == Task::Contact && mode == InputMode::Bimodal {
        return Err(Error::validation(
            "contact-map prediction cannot use bimodal input: the target contact map would be an input feature; \
             use input mode infer-missing-hic",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub heads: HeadConfig,
}

impl ModelConfig {
    /// Small configuration that trains in seconds on one core: 16-bin windows
    /// at 1 kb with 100 bp track bins.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                window: 16,
                patch: 2,
                dim: 16,
                blocks: 1,
                track_length: 320,
                track_channels: 2,
                track_tokens: 32,
                heads: 2,
                dropout: 0.0,
                conv_kernel: 5,
                pool_factors: vec![5, 2, 1, 1],
            },
            ..Self::default()
        }
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        self.encoder.validate()?;
        ensure!(self.loss.temperature > 0.0, "temperature must be positive");
        if matches!(task, Task::Cage | Task::Contact) {
            ensure!(
                self.encoder.track_tokens == 2 * self.encoder.window,
                "cage and contact tasks need track_tokens ({}) = 2 x window ({})",
                self.encoder.track_tokens,
                self.encoder.window
            );
        }
        Ok(())
    }
}

/// One mini-batch as tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, H, W)`
    pub maps: Tensor,
    /// `(B, L1, O)`
    pub tracks: Tensor,
    /// `(B,)` labels, `(B, L2)` expression or `(B, H, H)` contacts.
    pub target: Option<Tensor>,
    pub task: Task,
}

impl Batch {
    pub fn from_samples(samples: &[&SamplePair], task: Task) -> Result<Self> {
        ensure!(!samples.is_empty(), "empty batch");
        let first = samples[0];
        let (h, l, o) = (first.contact.size, first.track.length, first.track.channels);
        let b = samples.len();
        let mut maps = Vec::with_capacity(b * h * h);
        let mut tracks = Vec::with_capacity(b * l * o);
        let mut targets = Vec::new();
        for s in samples {
            ensure!(
                s.contact.size == h && s.track.length == l && s.track.channels == o,
                "samples in one batch have different shapes"
            );
            ensure!(
                s.track.values.len() == l * o && s.contact.values.len() == h * h,
                "sample buffers do not match their declared shapes"
            );
            maps.extend_from_slice(&s.contact.values);
            tracks.extend_from_slice(&s.track.values);
            match (task, &s.target) {
                (Task::None, _) => {}
                (Task::Loop, SampleTarget::LoopLabel(y)) => targets.push(*y as f64),
                (Task::Cage, SampleTarget::Cage(v)) => targets.extend_from_slice(v),
                (Task::Contact, SampleTarget::Contact(v)) => {
                    ensure!(v.len() == h * h, "contact target has {} values, expected {}", v.len(), h * h);
                    targets.extend_from_slice(v)
                }
                (task, t) => {
                    return Err(Error::validation(format!(
                        "task {task} does not match sample target {}",
                        t.kind()
                    )))
                }
            }
        }
        let dev = device();
        let target = match task {
            Task::None => None,
            Task::Loop => Some(Tensor::from_vec(targets, b, &dev)?),
            Task::Cage => {
                ensure!(targets.len() % b == 0, "expression targets differ in length");
                let n = targets.len() / b;
                Some(Tensor::from_vec(targets, (b, n), &dev)?)
            }
            Task::Contact => Some(Tensor::from_vec(targets, (b, h, h), &dev)?),
        };
        Ok(Self {
            maps: Tensor::from_vec(maps, (b, h, h), &dev)?,
            tracks: Tensor::from_vec(tracks, (b, l, o), &dev)?,
            target,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.maps.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum TaskHead {
    None,
    Loop(LoopHead),
    Cage(Decoder, CageHead),
    Contact(Decoder, ContactHead),
}

/// Encoders, cross-modal blocks and (for fine-tuning) the fusion block and
/// one task head, with all weights in a single [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MixHic {
    pub config: ModelConfig,
    pub task: Task,
    pub params: ParamStore,
    hic: HicEncoder,
    epi: EpiEncoder,
    interaction: InteractionBlock,
    mapping: MappingBlock,
    fusion: Option<Fusion>,
    head: TaskHead,
}

/// Per-sample outputs of a task forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutput {
    LoopProbability(f64),
    Cage(Vec<f64>),
    /// Row-major `H × H`.
    Contact(Vec<f64>),
}

impl MixHic {
    pub fn new(config: &ModelConfig, task: Task, seed: u64) -> Result<Self> {
        config.validate(task)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let enc = &config.encoder;
        let c3 = enc.bottleneck_dim();
        let hic = HicEncoder::new(&mut init.sub("hic"), enc)?;
        let epi = EpiEncoder::new(&mut init.sub("epi"), enc)?;
        let interaction = InteractionBlock::new(&mut init.sub("interaction"), c3)?;
        let mapping = MappingBlock::new(&mut init.sub("mapping"), c3)?;
        let fusion = match task {
            Task::None => None,
            _ => Some(Fusion::new(&mut init.sub("fusion"), enc.blocks, c3, enc.heads)?),
        };
        let head = match task {
            Task::None => TaskHead::None,
            Task::Loop => TaskHead::Loop(LoopHead::new(&mut init.sub("head.loop"), c3)?),
            Task::Cage => TaskHead::Cage(
                Decoder::new(&mut init.sub("decoder"), enc.stage_dims(), enc.blocks, enc.heads)?,
                CageHead::new(&mut init.sub("head.cage"), enc.dim)?,
            ),
            Task::Contact => TaskHead::Contact(
                Decoder::new(&mut init.sub("decoder"), enc.stage_dims(), enc.blocks, enc.heads)?,
                ContactHead::new(&mut init.sub("head.contact"), enc.dim, &config.heads)?,
            ),
        };
        Ok(Self {
            config: config.clone(),
            task,
            params,
            hic,
            epi,
            interaction,
            mapping,
            fusion,
            head,
        })
    }

    pub fn encode_hic(&self, batch: &Batch, ctx: &Ctx) -> Result<StageOutputs> {
        self.hic.forward(&batch.maps, ctx)
    }

    pub fn encode_epi(&self, batch: &Batch, ctx: &Ctx) -> Result<StageOutputs> {
        self.epi.forward(&batch.tracks, ctx)
    }

    pub fn pretrain_embeddings(&self, batch: &Batch, ctx: &Ctx) -> Result<CrossModalEmbeddings> {
        let hic = self.encode_hic(batch, ctx)?;
        let epi = self.encode_epi(batch, ctx)?;
        let hic = self.interaction.project_hic(&hic.bottleneck)?;
        let epi = self.interaction.project_epi(&epi.bottleneck)?;
        let (hic_to_epi, epi_to_hic) = self.mapping.forward(&hic.concat, &epi.concat)?;
        Ok(CrossModalEmbeddings {
            hic,
            epi,
            hic_to_epi,
            epi_to_hic,
        })
    }

    pub fn pretrain_loss(&self, batch: &Batch, ctx: &Ctx) -> Result<(Tensor, PretrainLossReport)> {
        let emb = self.pretrain_embeddings(batch, ctx)?;
        crossmodal::pretrain_loss(&emb, &self.config.loss)
    }

    /// Raw task outputs: probabilities `(B,)`, expression `(B, L2)` or
    /// contact maps `(B, H, H)`.
    pub fn task_forward(&self, batch: &Batch, mode: InputMode, ctx: &Ctx) -> Result<Tensor> {
        check_leakage(self.task, mode)?;
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::validation("model has no task head; fine-tune it first"))?;
        let epi = self.encode_epi(batch, ctx)?;
        let epi_proj = self.interaction.project_epi(&epi.bottleneck)?;
        let context = match mode {
            InputMode::Bimodal => {
                let hic = self.encode_hic(batch, ctx)?;
                self.interaction.project_hic(&hic.bottleneck)?.concat
            }
            InputMode::InferMissingHic => {
                let len = self.config.encoder.hic_lengths()[STAGES];
                self.mapping.epi_to_hic(&epi_proj.concat, len)?
            }
            InputMode::TrackOnly => epi_proj.concat.clone(),
        };
        let fused = fusion.forward(&epi_proj.concat, &context, ctx)?;
        let skips = [epi.stage(2), epi.stage(1), epi.stage(0)];
        let out = match &self.head {
            TaskHead::None => unreachable!("fusion exists only with a head"),
            TaskHead::Loop(h) => h.forward(&fused)?,
            TaskHead::Cage(dec, h) => h.forward(&dec.forward(&fused, skips, ctx)?)?,
            TaskHead::Contact(dec, h) => h.forward(&dec.forward(&fused, skips, ctx)?)?,
        };
        nn::check_finite(&out, "task head")?;
        Ok(out)
    }

    /// BCE for loops, MSE otherwise.
    pub fn task_loss(&self, batch: &Batch, mode: InputMode, ctx: &Ctx) -> Result<Tensor> {
        ensure!(batch.task == self.task, "batch built for task {} but model is {}", batch.task, self.task);
        let target = batch
            .target
            .as_ref()
            .ok_or_else(|| Error::validation("batch has no targets"))?;
        let out = self.task_forward(batch, mode, ctx)?;
        match self.task {
            Task::Loop => fusion_heads::bce_loss(&out, target),
            _ => fusion_heads::mse_loss(&out, target),
        }
    }

    /// Deterministic per-sample predictions, in input order.
    pub fn predict(&self, samples: &[&SamplePair], mode: InputMode, batch_size: usize) -> Result<Vec<TaskOutput>> {
        let ctx = Ctx::eval();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size.max(1)) {
            let batch = Batch::from_samples(chunk, Task::None)?;
            let y = self.task_forward(&batch, mode, &ctx)?;
            match self.task {
                Task::Loop => out.extend(y.to_vec1::<f64>()?.into_iter().map(TaskOutput::LoopProbability)),
                Task::Cage => out.extend(y.to_vec2::<f64>()?.into_iter().map(TaskOutput::Cage)),
                Task::Contact => out.extend(
                    y.to_vec3::<f64>()?
                        .into_iter()
                        .map(|m| TaskOutput::Contact(m.into_iter().flatten().collect())),
                ),
                Task::None => unreachable!(),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genomic_io::GenomicInterval;
    use crate::preprocessing::{ContactMapWindow, TrackWindow};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                window: 8,
                patch: 2,
                dim: 4,
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

    fn sample(seed: u64, target: SampleTarget) -> SamplePair {
        let iv = GenomicInterval::new("chr1", 0, 8000).unwrap();
        let f = |i: usize| ((i as f64 + seed as f64 * 7.1) * 0.731).sin().abs();
        SamplePair {
            contact: ContactMapWindow {
                values: (0..64).map(f).collect(),
                size: 8,
                origin_x: iv.clone(),
                origin_y: iv,
                resolution_bp: 1000,
            },
            track: TrackWindow {
                values: (0..64).map(|i| f(i + 100)).collect(),
                length: 32,
                channels: 2,
            },
            target,
        }
    }

    #[test]
    fn leakage_guard() {
        assert!(check_leakage(Task::Contact, InputMode::Bimodal).is_err());
        assert!(check_leakage(Task::Contact, InputMode::InferMissingHic).is_ok());
        assert!(check_leakage(Task::Loop, InputMode::Bimodal).is_ok());
    }

    #[test]
    fn task_shapes_per_mode() {
        let cfg = tiny_config();
        for (task, target) in [
            (Task::Loop, SampleTarget::LoopLabel(1)),
            (Task::Cage, SampleTarget::Cage(vec![0.5; 16])),
            (Task::Contact, SampleTarget::Contact(vec![0.1; 64])),
        ] {
            let model = MixHic::new(&cfg, task, 3).unwrap();
            let samples = [sample(1, target.clone()), sample(2, target.clone()), sample(3, target)];
            let refs: Vec<_> = samples.iter().collect();
            let batch = Batch::from_samples(&refs, task).unwrap();
            for mode in [InputMode::Bimodal, InputMode::InferMissingHic, InputMode::TrackOnly] {
                if check_leakage(task, mode).is_err() {
                    assert!(model.task_forward(&batch, mode, &Ctx::eval()).is_err());
                    continue;
                }
                let y = model.task_forward(&batch, mode, &Ctx::eval()).unwrap();
                let want: Vec<usize> = match task {
                    Task::Loop => vec![3],
                    Task::Cage => vec![3, 16],
                    _ => vec![3, 8, 8],
                };
                assert_eq!(y.dims(), want.as_slice());
                let loss = nn::scalar(&model.task_loss(&batch, mode, &Ctx::eval()).unwrap()).unwrap();
                assert!(loss.is_finite() && loss >= 0.0);
            }
            let preds = model.predict(&refs, InputMode::InferMissingHic, 2).unwrap();
            assert_eq!(preds.len(), 3);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MixHic::new(&tiny_config(), Task::Loop, 9).unwrap();
        let b = MixHic::new(&tiny_config(), Task::Loop, 9).unwrap();
        let c = MixHic::new(&tiny_config(), Task::Loop, 10).unwrap();
        let sa = a.params.snapshot().unwrap();
        let sb = b.params.snapshot().unwrap();
        let sc = c.params.snapshot().unwrap();
        let flat = |s: &std::collections::BTreeMap<String, Tensor>| -> Vec<f64> {
            s.values().flat_map(|t| nn::to_vec1(t).unwrap()).collect()
        };
        assert_eq!(flat(&sa), flat(&sb));
        assert_ne!(flat(&sa), flat(&sc));
    }

    #[test]
    fn target_mismatch_rejected() {
        let s = sample(1, SampleTarget::LoopLabel(0));
        assert!(Batch::from_samples(&[&s], Task::Cage).is_err());
    }
}
