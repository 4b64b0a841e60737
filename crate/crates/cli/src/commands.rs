//! The six subcommands. Each one reads its settings namespace, produces
//! artifacts strictly inside the run directory, and prints a short
//! human-readable account to stdout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gsvsr_core::ablate::{run_ablation, AblationSettings};
use gsvsr_core::bench::{run_bench, BenchSettings};
use gsvsr_core::checks::{run_checks, FaultInjection};
use gsvsr_core::data::{
    default_clip_specs, frame, generate_dataset, load_clip, read_manifest, ClipSample, Motion,
};
use gsvsr_core::pipeline::{
    bicubic_up, clip_metrics, evaluate, load_checkpoint, save_checkpoint, super_resolve, train,
    Model, TrainConfig,
};
use gsvsr_core::tensor::{write_ppm, ImageU8};
use gsvsr_core::{Error, Result};

use crate::config::Settings;

fn required_path(s: &Settings, key: &str, what: &str) -> Result<PathBuf> {
    let value = s.get(key);
    if value.is_empty() {
        return Err(Error::config(format!("{key}: required — set it to {what}")));
    }
    Ok(PathBuf::from(value))
}

/// Renders the stock corpus with the configured extents and motion scale
/// into `<out>/dataset/`.
pub fn gen(s: &Settings, out: &Path) -> Result<()> {
    let factor = s.f64("gen.motion_scale");
    let extent = s.usize("gen.lr_extent");
    let mut specs = default_clip_specs(s.usize("gen.clips"), s.usize("gen.scale"), s.u64("seed"));
    for spec in &mut specs {
        spec.t_len = s.usize("gen.t_len");
        spec.lr_h = extent;
        spec.lr_w = extent;
        spec.flow_radius = s.usize("gen.flow_radius");
        spec.motion = match spec.motion {
            Motion::Zero => Motion::Zero,
            Motion::Translation { dx, dy } => Motion::Translation {
                dx: dx * factor,
                dy: dy * factor,
            },
            Motion::Rotation { rate } => Motion::Rotation { rate: rate * factor },
        };
        spec.validate()?;
    }
    let dir = out.join("dataset");
    let records = generate_dataset(&dir, &specs)?;
    println!("wrote {} clips under {}", records.len(), dir.display());
    for r in &records {
        println!("  {} t={} lr={}x{} scale={}", r.id, r.t_len, r.lr_h, r.lr_w, r.scale);
    }
    Ok(())
}

/// Runs the invariant suites; a failing check fails the command after the
/// full table has been printed and saved.
pub fn check(s: &Settings, out: &Path) -> Result<()> {
    let fault = match s.get("check.fault") {
        "none" => None,
        "scan-sign" => Some(FaultInjection::ScanSign),
        other => return Err(Error::config(format!("check.fault: unknown mode {other:?}"))),
    };
    let report = run_checks(s.get("check.filter"), fault);
    let table = report.render_table();
    print!("{table}");
    fs::write(out.join("checks.txt"), &table)?;
    let failures = report.failures();
    if let Some(first) = failures.first() {
        return Err(Error::contract(format!(
            "{} of {} checks failed (first: {} {})",
            failures.len(),
            report.results.len(),
            first.suite,
            first.name
        )));
    }
    Ok(())
}

/// Trains the configured preset on a generated dataset; writes the
/// checkpoint, the loss curve, and an evaluation table for the held-out
/// tail of the manifest.
pub fn train_cmd(s: &Settings, out: &Path) -> Result<()> {
    let dir = required_path(s, "train.dataset", "a dataset directory (see the gen command)")?;
    let records = read_manifest(&dir)?;
    if records.is_empty() {
        return Err(Error::contract("dataset manifest lists no clips"));
    }
    let clips: Vec<ClipSample> = records
        .iter()
        .map(|r| load_clip(&dir, &r.id))
        .collect::<Result<_>>()?;
    let holdout = s.usize("train.holdout").min(clips.len() - 1);
    let split = clips.len() - holdout;
    let (train_set, held_out) = clips.split_at(split);

    let cfg = s.model_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.u64("seed"));
    let mut model = Model::new(cfg, &mut rng)?;
    let mut tc = TrainConfig::toy(s.usize("train.steps"));
    tc.base_lr = s.f64("train.base_lr");
    let log = train(&mut model, train_set, &tc)?;

    save_checkpoint(&out.join("model.ckpt"), &model)?;
    fs::write(out.join("loss.csv"), log.to_csv())?;

    let (eval_records, eval_set) = if held_out.is_empty() {
        (&records[..split], train_set)
    } else {
        (&records[split..], held_out)
    };
    let named: Vec<(String, ClipSample)> = eval_records
        .iter()
        .zip(eval_set)
        .map(|(r, c)| (r.id.clone(), c.clone()))
        .collect();
    let report = evaluate(&model, &named)?;
    fs::write(out.join("eval.csv"), report.to_csv())?;

    println!(
        "trained {} steps on {} clips, evaluated on {} {}",
        log.losses.len(),
        train_set.len(),
        named.len(),
        if held_out.is_empty() { "training clips (nothing held out)" } else { "held-out clips" }
    );
    print!("{}", report.render_table());
    if let (Some(first), Some(last)) = (log.losses.first(), log.losses.last()) {
        println!("loss {first:.4e} -> {last:.4e}");
    }
    println!("checkpoint: {}", out.join("model.ckpt").display());
    Ok(())
}

/// Upscales one clip from a dataset with a trained checkpoint; writes the
/// frames as PPM plus a one-row metrics table against the bicubic
/// baseline.
pub fn sr(s: &Settings, out: &Path) -> Result<()> {
    let ckpt = required_path(s, "sr.checkpoint", "a checkpoint written by the train command")?;
    let dataset = required_path(s, "sr.dataset", "the dataset directory holding the input clip")?;
    let model = load_checkpoint(&ckpt)?;
    let records = read_manifest(&dataset)?;
    let id = match s.get("sr.clip") {
        "" => records
            .first()
            .map(|r| r.id.clone())
            .ok_or_else(|| Error::contract("dataset manifest lists no clips"))?,
        want => records
            .iter()
            .find(|r| r.id == want)
            .map(|r| r.id.clone())
            .ok_or_else(|| Error::config(format!("sr.clip: {want:?} is not in the manifest")))?,
    };
    let clip = load_clip(&dataset, &id)?;
    let upscaled = super_resolve(&model, &clip)?;
    for t in 0..clip.t_len() {
        let img = ImageU8::from_tensor(&frame(&upscaled, t))?;
        write_ppm(&out.join(format!("sr_{t:02}.ppm")), &img)?;
    }
    let (psnr, ssim) = clip_metrics(&upscaled, &clip.hr)?;
    let baseline = bicubic_up(&clip)?;
    let (psnr_b, ssim_b) = clip_metrics(&baseline, &clip.hr)?;
    fs::write(
        out.join("metrics.csv"),
        format!(
            "clip_id,psnr,ssim,psnr_bicubic,ssim_bicubic\n{id},{psnr:.6},{ssim:.6},{psnr_b:.6},{ssim_b:.6}\n"
        ),
    )?;
    println!(
        "{id}: psnr {psnr:.3} dB (bicubic {psnr_b:.3}, delta {:+.3}), ssim {ssim:.4}",
        psnr - psnr_b
    );
    println!("frames: {}", out.join("sr_NN.ppm").display());
    Ok(())
}

/// Trains the six propagation variants on the shared benchmark and ranks
/// them; the verdict lines report the expected-ordering check without
/// failing the run.
pub fn ablate(s: &Settings, out: &Path) -> Result<()> {
    let settings = AblationSettings {
        steps: s.usize("ablate.steps"),
        seed: s.u64("seed"),
        t_len: s.usize("ablate.t_len"),
        lr_extent: s.usize("ablate.lr_extent"),
        train_clips: s.usize("ablate.train_clips"),
        eval_clips: s.usize("ablate.eval_clips"),
        gsm_blocks: s.usize("ablate.gsm_blocks"),
        zero_motion: s.bool("ablate.zero_motion"),
    };
    let report = run_ablation(&settings)?;
    let mut text = report.render_table();
    text.push_str(&format!(
        "aligned-vs-unaligned gap: {:+.3} dB\n",
        report.aligned_gap()?
    ));
    let violations = report.ordering_violations(s.f64("ablate.min_gap"))?;
    if violations.is_empty() {
        text.push_str("expected ordering holds\n");
    } else {
        for v in &violations {
            text.push_str(&format!("ordering violation — {v}\n"));
        }
    }
    print!("{text}");
    fs::write(out.join("ablation.txt"), &text)?;
    fs::write(out.join("ablation.csv"), report.to_csv())?;
    Ok(())
}

/// Times the scans against full attention over the configured length
/// sweep and reports fitted log-log exponents.
pub fn bench(s: &Settings, out: &Path) -> Result<()> {
    let settings = BenchSettings {
        lengths: s.usize_list("bench.lengths"),
        d_model: s.usize("bench.d_model"),
        d_state: s.usize("bench.d_state"),
        heads: s.usize("bench.heads"),
        target_sample_secs: s.f64("bench.target_sample_secs"),
        seed: s.u64("seed"),
    };
    let report = run_bench(&settings)?;
    print!("{}", report.render_table());
    let (from, to) = (8192, 16384);
    let ratios: Vec<String> = report
        .series
        .iter()
        .filter_map(|series| {
            series
                .ratio(from, to)
                .map(|r| format!("{} x{:.2}", series.name, r))
        })
        .collect();
    if !ratios.is_empty() {
        println!("doubling {from} -> {to}: {}", ratios.join(", "));
    }
    fs::write(out.join("bench.csv"), report.to_csv())?;
    Ok(())
}
