//! Desk-scale synthetic studies shared by the acceptance suite.

#![allow(dead_code)]

pub mod grad;

use std::fs;
use std::path::Path;

use mixhic::crossmodal::specific_invariant_cosine;
use mixhic::evaluation::{
    auroc, centred_anchors, corruption_experiment, loop_labels, loop_scores, perturbation_experiment, CorruptionMode,
    RatioPoint,
};
use mixhic::genomic_io::{load_manifest, Split};
use mixhic::loop_annotation::{annotate_to_bedpe, AnnotationParams, ChromosomeAnnotation};
use mixhic::model::{Batch, InputMode, MixHic, ModelConfig, Task, TaskOutput};
use mixhic::nn::Ctx;
use mixhic::preprocessing::{Dataset, SamplePair, SampleTarget, WindowSampling};
use mixhic::synthetic::{generate_chromosome, generate_samples, write_synthetic_files, SplitLayout, SyntheticSpec, WindowCounts};
use mixhic::training::{finetune, model_from_checkpoint, pretrain, Checkpoint, TrainConfig};
use mixhic::Result;

pub const RATIOS: [f64; 4] = [0.0, 0.5, 0.7, 0.9];
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Mean `(hic, epi)` specific/invariant cosine over `samples`.
pub fn mean_cosines(model: &MixHic, samples: &[SamplePair]) -> Result<(f64, f64)> {
    let ctx = Ctx::eval();
    let (mut hic, mut epi, mut n) = (0.0, 0.0, 0usize);
    for chunk in samples.chunks(64) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let emb = model.pretrain_embeddings(&Batch::from_samples(&refs, Task::None)?, &ctx)?;
        let (h, e) = specific_invariant_cosine(&emb)?;
        hic += h * chunk.len() as f64;
        epi += e * chunk.len() as f64;
        n += chunk.len();
    }
    Ok((hic / n as f64, epi / n as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct OrthogonalityResult {
    pub before: (f64, f64),
    pub after: (f64, f64),
}

impl OrthogonalityResult {
    pub fn passes(&self) -> bool {
        self.after.0 <= 0.1 * self.before.0 && self.after.1 <= 0.1 * self.before.1
    }
}

pub const ORTHOGONALITY_LEARNING_RATE: f64 = 1e-2;

/// 200 pretraining steps on 512 pairs of the default generator.
pub fn orthogonality_study(seed: u64, dir: &Path) -> Result<OrthogonalityResult> {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let layout = SplitLayout {
        train: 3,
        validation: 1,
        test: 1,
    };
    let counts = WindowCounts {
        train: 512,
        validation: 0,
        test: 0,
    };
    let (_, samples) = generate_samples(&spec, &layout, &counts, Task::None, &WindowSampling::default(), dir)?;
    let pairs = &samples[&Split::Train];
    let config = ModelConfig::desk();
    let mut train = TrainConfig::pretrain(seed);
    train.max_epochs = 1000;
    train.max_steps = Some(200);
    // 200 steps at the desk rate (1e-4) barely move the cosines; the
    // orthogonality term needs a stronger step to act within that budget.
    train.learning_rate = ORTHOGONALITY_LEARNING_RATE;
    let untrained = MixHic::new(&config, Task::None, seed)?;
    let before = mean_cosines(&untrained, pairs)?;
    let outcome = pretrain(pairs, &[], &config, &train)?;
    let after = mean_cosines(&outcome.trainer.model, pairs)?;
    Ok(OrthogonalityResult { before, after })
}

/// Generator used by the loop studies: the default generator on longer
/// chromosomes so that 2000 training windows exist.
pub fn loop_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_bins: 4000,
        loop_count: 200,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn loop_sampling() -> WindowSampling {
    WindowSampling {
        far_distance_limit: Some(130),
        ..WindowSampling::default()
    }
}

pub struct LoopStudy {
    pub spec: SyntheticSpec,
    pub pretrained_auroc: f64,
    pub scratch_auroc: f64,
    pub recall: Vec<RatioPoint>,
    pub corruption: Vec<RatioPoint>,
    pub model: MixHic,
    pub checkpoint: Checkpoint,
}

/// Pretrains on unlabeled windows, fine-tunes a pretrained and a fresh model
/// on 2000 loop windows and probes the pretrained one.
pub fn loop_study(seed: u64, dir: &Path) -> Result<LoopStudy> {
    let spec = loop_spec(seed);
    let layout = SplitLayout {
        train: 5,
        validation: 1,
        test: 2,
    };
    let counts = WindowCounts {
        train: 2000,
        validation: 200,
        test: 500,
    };
    let sampling = loop_sampling();
    let (dataset, loops) = generate_samples(&spec, &layout, &counts, Task::Loop, &sampling, dir)?;
    let unlabeled = dataset.samples(Split::Train, Task::None, Some(2000), seed ^ 0x55, &sampling)?;
    let config = ModelConfig::desk();
    let mut pre = TrainConfig::pretrain(seed);
    pre.max_epochs = 1000;
    pre.max_steps = Some(200);
    let pretrained = pretrain(&unlabeled, &[], &config, &pre)?.trainer.checkpoint()?;

    let mut fine = TrainConfig::finetune(Task::Loop, seed);
    fine.max_epochs = 4;
    let test = &loops[&Split::Test];
    let labels = loop_labels(test)?;
    let run = |init: Option<&Checkpoint>| -> Result<(MixHic, Checkpoint, f64)> {
        let outcome = finetune(&loops[&Split::Train], &loops[&Split::Validation], &config, init, &fine)?;
        let model = model_from_checkpoint(&outcome.best)?;
        let scores = loop_scores(&model, test, InputMode::Bimodal, 64)?;
        let a = auroc(&scores, &labels)?;
        Ok((model, outcome.best, a))
    };
    let (model, checkpoint, pretrained_auroc) = run(Some(&pretrained))?;
    let (_, _, scratch_auroc) = run(None)?;

    let positives: Vec<SamplePair> = test
        .iter()
        .filter(|s| matches!(s.target, SampleTarget::LoopLabel(1)))
        .cloned()
        .collect();
    let anchors = positives.iter().map(centred_anchors).collect::<Result<Vec<_>>>()?;
    let recall = perturbation_experiment(&model, &positives, &anchors, &RATIOS, InputMode::Bimodal, 0.5)?;
    let corruption =
        corruption_experiment(&model, test, &RATIOS, CorruptionMode::Sparsify, InputMode::Bimodal, seed)?;
    Ok(LoopStudy {
        spec,
        pretrained_auroc,
        scratch_auroc,
        recall,
        corruption,
        model,
        checkpoint,
    })
}

pub struct AnnotationResult {
    pub planted: Vec<(usize, usize)>,
    pub recovered: usize,
    pub planted_calls: usize,
    pub null_calls: usize,
    pub deterministic: bool,
}

fn annotate_single(spec: &SyntheticSpec, model: &MixHic, dir: &Path) -> Result<(Vec<ChromosomeAnnotation>, bool)> {
    let layout = SplitLayout {
        train: 0,
        validation: 0,
        test: 1,
    };
    let manifest = write_synthetic_files(spec, &layout, dir)?;
    let dataset = Dataset::load(&load_manifest(&manifest)?)?;
    let chroms: Vec<String> = dataset.chromosomes.keys().cloned().collect();
    let params = AnnotationParams {
        max_distance_bins: spec.max_distance_bins,
        ..AnnotationParams::default()
    };
    let first = dir.join("calls_a.bedpe");
    let second = dir.join("calls_b.bedpe");
    let out = annotate_to_bedpe(&dataset, model, &chroms, &params, &first)?;
    annotate_to_bedpe(&dataset, model, &chroms, &params, &second)?;
    let same = fs::read(&first).ok() == fs::read(&second).ok();
    Ok((out, same))
}

/// Annotates a fresh chromosome with 5 planted loops and a loop-free one
/// drawn from the study's generator.
pub fn annotation_study(study: &LoopStudy, dir: &Path) -> Result<AnnotationResult> {
    let planted_spec = SyntheticSpec {
        n_bins: 600,
        loop_count: 5,
        seed: study.spec.seed ^ 0xA11,
        ..study.spec.clone()
    };
    let null_spec = SyntheticSpec {
        loop_count: 0,
        seed: study.spec.seed ^ 0xB22,
        ..planted_spec.clone()
    };
    let planted_dir = dir.join("planted");
    let null_dir = dir.join("null");
    let (planted_out, det_a) = annotate_single(&planted_spec, &study.model, &planted_dir)?;
    let (null_out, det_b) = annotate_single(&null_spec, &study.model, &null_dir)?;
    let name = &planted_out[0].chromosome;
    let truth = generate_chromosome(
        &SyntheticSpec {
            seed: mixhic::synthetic::chromosome_seed(planted_spec.seed, 0),
            ..planted_spec.clone()
        },
        name,
    )?
    .loop_bins;
    let res = planted_spec.resolution_bp;
    let calls: Vec<(usize, usize)> = planted_out[0]
        .calls
        .iter()
        .map(|c| ((c.anchor1.start / res) as usize, (c.anchor2.start / res) as usize))
        .collect();
    let recovered = truth
        .iter()
        .filter(|&&(i, j)| calls.iter().any(|&(a, b)| a.abs_diff(i) <= 1 && b.abs_diff(j) <= 1))
        .count();
    Ok(AnnotationResult {
        planted: truth,
        recovered,
        planted_calls: calls.len(),
        null_calls: null_out.iter().map(|a| a.calls.len()).sum(),
        deterministic: det_a && det_b,
    })
}

/// Contact-map study: pretrained model fine-tuned in infer mode against a
/// fresh model fine-tuned on tracks alone with the mapping block bypassed.
pub struct ContactStudy {
    pub infer_mse: f64,
    pub track_only_mse: f64,
}

pub fn contact_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        compartment_strength: 0.5,
        compartment_track_level: 1.0,
        seed,
        ..SyntheticSpec::default()
    }
}

fn contact_mse(model: &MixHic, samples: &[SamplePair], mode: InputMode) -> Result<f64> {
    let refs: Vec<&SamplePair> = samples.iter().collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for (out, s) in model.predict(&refs, mode, 32)?.into_iter().zip(samples) {
        let (TaskOutput::Contact(pred), SampleTarget::Contact(target)) = (out, &s.target) else {
            unreachable!("contact model on contact samples");
        };
        total += pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        n += pred.len();
    }
    Ok(total / n as f64)
}

pub fn contact_study(seed: u64, dir: &Path, train_windows: usize, epochs: usize) -> Result<ContactStudy> {
    let spec = contact_spec(seed);
    let layout = SplitLayout {
        train: 3,
        validation: 1,
        test: 1,
    };
    let counts = WindowCounts {
        train: train_windows,
        validation: 100,
        test: 200,
    };
    let sampling = WindowSampling {
        max_offset_bins: 0,
        ..WindowSampling::default()
    };
    let (dataset, samples) = generate_samples(&spec, &layout, &counts, Task::Contact, &sampling, dir)?;
    let unlabeled = dataset.samples(Split::Train, Task::None, Some(1024), seed ^ 0x77, &WindowSampling::default())?;
    let config = ModelConfig::desk();
    let mut pre = TrainConfig::pretrain(seed);
    pre.max_epochs = 1000;
    pre.max_steps = Some(200);
    let pretrained = pretrain(&unlabeled, &[], &config, &pre)?.trainer.checkpoint()?;

    let train = &samples[&Split::Train];
    let validation = &samples[&Split::Validation];
    let test = &samples[&Split::Test];
    let mut infer = TrainConfig::finetune(Task::Contact, seed);
    infer.max_epochs = epochs;
    let infer_model = model_from_checkpoint(&finetune(train, validation, &config, Some(&pretrained), &infer)?.best)?;
    let mut track_only = infer.clone();
    track_only.input_mode = InputMode::TrackOnly;
    let track_model = model_from_checkpoint(&finetune(train, validation, &config, None, &track_only)?.best)?;
    Ok(ContactStudy {
        infer_mse: contact_mse(&infer_model, test, InputMode::InferMissingHic)?,
        track_only_mse: contact_mse(&track_model, test, InputMode::TrackOnly)?,
    })
}

/// Count of seeds for which `pass` holds.
pub fn majority<T>(results: &[T], pass: impl Fn(&T) -> bool) -> usize {
    results.iter().filter(|r| pass(r)).count()
}
