use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use partseg::data::{curate, generate_dataset, AnnotatedCloud, CurateConfig, CurateReport, SynthConfig};
use partseg::decoder::{DecoderConfig, PromptQuery};
use partseg::encoder::{train_encoder, EncoderConfig, EncoderTrainConfig, EncoderTrainReport};
use partseg::inference::{benchmark, full_segment, gt_prompts, interactive_segment, sweep_deltas, BenchmarkReport, EvalConfig};
use partseg::model::SegModel;
use partseg::nn::Tensor;
use partseg::training::{train_decoder, DecoderStep, DecoderTrainConfig, DecoderTrainReport};

use crate::util::{bits, ensure};
use crate::Check;

const TRAIN_SHAPES: usize = 2000;
const TEST_SHAPES: usize = 200;
const POINTS: usize = 2048;
const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 2;
const MODEL_SEED: u64 = 0;
const RUNTIME_BUDGET_H: f64 = 4.0;

pub struct DeskRun {
    dir: PathBuf,
    train: Vec<AnnotatedCloud>,
    test: Vec<AnnotatedCloud>,
    curation: (CurateReport, CurateReport),
    encoder_snapshot: Vec<(String, Tensor)>,
    encoder_report: EncoderTrainReport,
    decoder_report: DecoderTrainReport,
    model: SegModel,
    bench: BenchmarkReport,
    timings: Vec<(&'static str, f64)>,
}

fn write_csv(path: PathBuf, header: &str, rows: impl Iterator<Item = String>) -> Result<(), String> {
    let mut f = fs::File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    writeln!(f, "{header}").map_err(|e| e.to_string())?;
    for r in rows {
        writeln!(f, "{r}").map_err(|e| e.to_string())?;
    }
    Ok(())
}

impl DeskRun {
    pub fn execute() -> Result<Self, String> {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let mut timings = Vec::new();
        let err = |e: partseg::Error| e.to_string();

        let t = Instant::now();
        let synth = SynthConfig { min_parts: 2, max_parts: 8, ..SynthConfig::default() };
        let raw_train = generate_dataset(TRAIN_SHAPES, TRAIN_SEED, POINTS, &synth).map_err(err)?;
        let raw_test = generate_dataset(TEST_SHAPES, TEST_SEED, POINTS, &synth).map_err(err)?;
        let (train, train_report) = curate(&raw_train, &CurateConfig::default()).map_err(err)?;
        let (test, test_report) = curate(&raw_test, &CurateConfig::default()).map_err(err)?;
        timings.push(("data", t.elapsed().as_secs_f64()));
        log::info!("curated {train_report:?} / {test_report:?}");

        let t = Instant::now();
        let mut model = SegModel::new(EncoderConfig::default(), DecoderConfig::default(), MODEL_SEED).map_err(err)?;
        let encoder_report =
            train_encoder(&model.encoder, &mut model.encoder_store, &train, &EncoderTrainConfig::default(), |_, _| {})
                .map_err(err)?;
        timings.push(("encoder", t.elapsed().as_secs_f64()));
        let encoder_snapshot = model.to_named();

        let t = Instant::now();
        let SegModel { encoder, encoder_store, decoder, decoder_store } = &mut model;
        let decoder_report =
            train_decoder(decoder, decoder_store, encoder, encoder_store, &train, &DecoderTrainConfig::default(), |_| {})
                .map_err(err)?;
        timings.push(("decoder", t.elapsed().as_secs_f64()));
        model.save(dir.join("desk.s2am")).map_err(err)?;

        let t = Instant::now();
        let bench = benchmark(&model, &test, &EvalConfig::default(), &sweep_deltas()).map_err(err)?;
        timings.push(("benchmark", t.elapsed().as_secs_f64()));

        write_csv(dir.join("encoder_loss.csv"), "step,loss", encoder_report.step_losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")))?;
        write_csv(
            dir.join("decoder_loss.csv"),
            "step,loss,bce,dice,pi",
            decoder_report.steps.iter().map(|s| format!("{},{},{},{},{}", s.step, s.loss, s.bce, s.dice, s.pi)),
        )?;
        let json = serde_json::to_string_pretty(&bench).map_err(|e| e.to_string())?;
        fs::write(dir.join("benchmark.json"), json).map_err(|e| e.to_string())?;

        Ok(Self {
            dir,
            train,
            test,
            curation: (train_report, test_report),
            encoder_snapshot,
            encoder_report,
            decoder_report,
            model,
            bench,
            timings,
        })
    }

    fn total_seconds(&self) -> f64 {
        self.timings.iter().map(|(_, s)| s).sum()
    }
}

pub fn end_to_end(run: &DeskRun) -> Check {
    let b = &run.bench;
    let ins = b.interactive_no_scale.dataset_miou;
    let is = b.interactive_scale.dataset_miou;
    let fns = b.full_no_scale.dataset_miou;
    let fs = b.full_scale.dataset_miou;
    let hours = run.total_seconds() / 3600.0;
    let timing: Vec<String> = run.timings.iter().map(|(n, s)| format!("{n} {:.1} min", s / 60.0)).collect();
    let summary = format!(
        "{} train / {} test clouds (curation {:?} / {:?}); encoder final epoch loss {:.4}, decoder {:.4}; \
         interactive no-scale {ins:.4}, +scale {is:.4}, full no-scale {fns:.4}, full +scale {fs:.4}; \
         runtime {hours:.2} h on {} core(s) ({}); artifacts in {}",
        run.train.len(),
        run.test.len(),
        run.curation.0,
        run.curation.1,
        run.encoder_report.epoch_means.last().copied().unwrap_or(f64::NAN),
        run.decoder_report.epoch_means.last().copied().unwrap_or(f64::NAN),
        std::thread::available_parallelism().map_or(1, |n| n.get()),
        timing.join(", "),
        run.dir.display(),
    );
    ensure(run.test.len() == TEST_SHAPES, || format!("held-out set shrank to {}: {summary}", run.test.len()))?;
    ensure(ins >= 0.60, || format!("interactive no-scale {ins:.4} < 0.60: {summary}"))?;
    ensure(is >= ins, || format!("+scale {is:.4} < no-scale {ins:.4}: {summary}"))?;
    ensure(fns >= ins - 0.05, || format!("full {fns:.4} < interactive {ins:.4} - 0.05: {summary}"))?;
    ensure(hours <= RUNTIME_BUDGET_H, || format!("runtime {hours:.2} h > {RUNTIME_BUDGET_H} h: {summary}"))?;
    Ok(summary)
}

pub fn sweep_direction(run: &DeskRun) -> Check {
    let delta = |d: f32| {
        run.bench.sweep.iter().find(|r| (r.delta - d).abs() < 1e-6).map(|r| r.delta_iou.abs()).ok_or(format!("no sweep row for {d}"))
    };
    let far = delta(3.0)?;
    let mut lines = Vec::new();
    for sign in [-1.0f32, 1.0] {
        let (small, mid) = (delta(0.1 * sign)?, delta(0.5 * sign)?);
        lines.push(format!("|d({:+.1})| {small:.4} < |d({:+.1})| {mid:.4} < |d(+3)| {far:.4}", 0.1 * sign, 0.5 * sign));
        ensure(small < mid && mid < far, || format!("not monotone: {}", lines.join("; ")))?;
    }
    Ok(lines.join("; "))
}

fn step_bits(s: &DecoderStep) -> [u64; 4] {
    [s.loss.to_bits(), s.bce.to_bits(), s.dice.to_bits(), s.pi.to_bits()]
}

pub fn determinism(run: &DeskRun) -> Check {
    let err = |e: partseg::Error| e.to_string();

    // Encoder: one epoch from the same seed reproduces the first epoch.
    let mut fresh = SegModel::new(EncoderConfig::default(), DecoderConfig::default(), MODEL_SEED).map_err(err)?;
    let cfg = EncoderTrainConfig { epochs: 1, ..EncoderTrainConfig::default() };
    let replay = train_encoder(&fresh.encoder, &mut fresh.encoder_store, &run.train, &cfg, |_, _| {}).map_err(err)?;
    let n_enc = replay.step_losses.len();
    let same_enc = replay.step_losses.iter().zip(&run.encoder_report.step_losses).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(n_enc > 0 && same_enc, || "encoder loss curve differs on replay".into())?;

    // Decoder: one epoch from the post-encoder snapshot, on a different
    // worker count, reproduces the first epoch.
    let mut again = SegModel::from_named(&run.encoder_snapshot).map_err(err)?;
    let cfg = DecoderTrainConfig { epochs: 1, threads: 2, ..DecoderTrainConfig::default() };
    let SegModel { encoder, encoder_store, decoder, decoder_store } = &mut again;
    let replay = train_decoder(decoder, decoder_store, encoder, encoder_store, &run.train, &cfg, |_| {}).map_err(err)?;
    let n_dec = replay.steps.len();
    let same_dec = replay.steps.iter().zip(&run.decoder_report.steps).all(|(a, b)| step_bits(a) == step_bits(b));
    ensure(n_dec > 0 && same_dec, || "decoder loss curve differs on replay".into())?;

    // Inference: a reloaded checkpoint answers every prompt bit for bit.
    let loaded = SegModel::load(run.dir.join("desk.s2am")).map_err(err)?;
    let mut prompts = 0;
    for cloud in run.test.iter().take(10) {
        let labels = cloud.labels.as_ref().expect("curated clouds are labelled");
        for with_scale in [false, true] {
            let qs = gt_prompts(labels, &cloud.points, with_scale).map_err(err)?;
            for q in &qs {
                let a = interactive_segment(&run.model, &cloud.points, *q, 0.7).map_err(err)?;
                let b = interactive_segment(&loaded, &cloud.points, *q, 0.7).map_err(err)?;
                let c = interactive_segment(&loaded, &cloud.points, PromptQuery::new(q.index, q.scale), 0.7).map_err(err)?;
                ensure(bits(&a.probabilities) == bits(&b.probabilities) && bits(&b.probabilities) == bits(&c.probabilities), || {
                    format!("cloud {} prompt {} scale {:?}: probabilities differ", cloud.id, q.index, q.scale)
                })?;
                prompts += 1;
            }
            let cfg = EvalConfig::default().full_seg();
            let x = full_segment(&run.model, &cloud.points, &qs, &cfg).map_err(err)?;
            let y = full_segment(&loaded, &cloud.points, &qs, &cfg).map_err(err)?;
            ensure(x.labels == y.labels, || format!("cloud {}: full segmentation differs", cloud.id))?;
        }
    }
    Ok(format!(
        "encoder replay: {n_enc} step losses bit-equal; decoder replay (2 workers): {n_dec} steps bit-equal; \
         {prompts} prompts and 20 full segmentations bit-equal across a checkpoint reload"
    ))
}
