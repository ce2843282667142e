//! The four subcommands. All filesystem writes in the whole workspace
//! happen here, and every file written carries the spec hash and the
//! effective seed for auditability.

use std::fs;
use std::path::{Path, PathBuf};

use coopflow::autodiff::{checkpoint, ParamSet};
use coopflow::error::{Error, Result};
use coopflow::model::{init_params, CodecWidth, ModelSpec};
use coopflow::sim::{simulate, Scenario};
use coopflow::sweep::{run_sweep, CheckpointSet, SweepResult, Variant};
use coopflow::train::{train_stage1, train_stage2, DerivativeKind, TrainReport};
use coopflow::verify;
use serde::{Deserialize, Serialize};

use crate::config::{
    derive_seed, stage1_config, stage2_config, sweep_config, world_config, LoadedSpec, EVAL_STREAM,
    TRAIN_STREAM,
};

/// On-disk scenario record: the scenario plus its audit trail.
#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    spec_sha256: String,
    seed: u64,
    scenario: Scenario,
}

fn audit_preamble(loaded: &LoadedSpec) -> String {
    format!("# spec_sha256 = {}\n# seed = {}\n", loaded.sha256, loaded.seed)
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn scenario_set(loaded: &LoadedSpec, stream: u64, count: usize) -> Vec<Scenario> {
    (0..count)
        .map(|i| {
            let seed = derive_seed(loaded.seed, stream, i as u64);
            simulate(&world_config(&loaded.spec, seed))
        })
        .collect()
}

fn write_scenarios(loaded: &LoadedSpec, dir: &Path, scenarios: &[Scenario]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, sc) in scenarios.iter().enumerate() {
        let record = ScenarioFile {
            spec_sha256: loaded.sha256.clone(),
            seed: loaded.seed,
            scenario: sc.clone(),
        };
        let json = serde_json::to_string_pretty(&record)
            .map_err(|e| Error::format(0, format!("scenario encode: {e}")))?;
        write_text(&dir.join(format!("scenario_{i:03}.json")), &(json + "\n"))?;
    }
    Ok(())
}

pub fn cmd_gen(loaded: &LoadedSpec, out: &Path) -> Result<()> {
    let train = scenario_set(loaded, TRAIN_STREAM, loaded.spec.world.train_scenarios);
    let eval = scenario_set(loaded, EVAL_STREAM, loaded.spec.world.eval_scenarios);
    write_scenarios(loaded, &out.join("train"), &train)?;
    write_scenarios(loaded, &out.join("eval"), &eval)?;
    println!(
        "generated {} training and {} evaluation scenarios under {}",
        train.len(),
        eval.len(),
        out.display()
    );
    Ok(())
}

fn read_scenarios(dir: &Path, expect_sha: &str) -> Result<Vec<Scenario>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!("no scenario files under {}", dir.display())));
    }
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        let record: ScenarioFile = serde_json::from_str(&text)
            .map_err(|e| Error::format(0, format!("{}: {e}", p.display())))?;
        if record.spec_sha256 != expect_sha {
            log::warn!(
                "{} was generated from spec {} but this run uses {}",
                p.display(),
                &record.spec_sha256[..12],
                &expect_sha[..12]
            );
        }
        out.push(record.scenario);
    }
    Ok(out)
}

/// Checkpoint files carry a one-line audit preamble ahead of the binary
/// parameter payload.
fn write_checkpoint(loaded: &LoadedSpec, path: &Path, params: &ParamSet) -> Result<()> {
    let mut bytes =
        format!("# coopflow-checkpoint spec_sha256={} seed={}\n", loaded.sha256, loaded.seed)
            .into_bytes();
    bytes.extend_from_slice(&checkpoint::to_bytes(params));
    fs::write(path, bytes)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn read_checkpoint(path: &Path, expect_sha: &str) -> Result<ParamSet> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(0, format!("{}: missing audit preamble", path.display())))?;
    let header = String::from_utf8_lossy(&bytes[..nl]);
    if !header.starts_with("# coopflow-checkpoint") {
        return Err(Error::format(0, format!("{}: not a checkpoint file", path.display())));
    }
    if !header.contains(expect_sha) {
        log::warn!("{} was trained under a different spec ({})", path.display(), header.trim());
    }
    checkpoint::from_bytes(&bytes[nl + 1..])
}

fn log_rows(out: &mut String, stage: &str, width: &str, report: &TrainReport) {
    for e in &report.epochs {
        out.push_str(&format!("{stage},{width},{},{:.6},{:.6},{:.6}\n", e.epoch, e.loss, e.cls, e.reg));
    }
}

pub fn cmd_train(loaded: &LoadedSpec, scenario_dir: &Path, out: &Path) -> Result<()> {
    let variants = sweep_config(&loaded.spec, loaded.seed)?.variants;
    let need_narrow = variants.iter().any(|v| !v.wide());
    let need_wide = variants.iter().any(|v| v.wide());
    let scenarios = read_scenarios(&scenario_dir.join("train"), &loaded.sha256)?;
    fs::create_dir_all(out)?;
    let mut log_csv = audit_preamble(loaded);
    log_csv.push_str("stage,width,epoch,loss,cls,reg\n");
    let s1 = stage1_config(&loaded.spec, loaded.seed);
    let s2 = stage2_config(&loaded.spec, loaded.seed);
    for (needed, codec, width, kind) in [
        (need_narrow, CodecWidth::Narrow, "narrow", DerivativeKind::Sender),
        (need_wide, CodecWidth::Wide, "wide", DerivativeKind::Receiver),
    ] {
        if !needed {
            continue;
        }
        let init_seed = match codec {
            CodecWidth::Narrow => loaded.spec.model.init_seed,
            CodecWidth::Wide => loaded.spec.model.init_seed + 1,
        };
        let mut params = init_params(&ModelSpec { codec }, init_seed);
        log::info!("stage 1 ({width}): {} scenarios, {} epochs", scenarios.len(), s1.epochs);
        let r1 = train_stage1(&mut params, &scenarios, &s1)?;
        log_rows(&mut log_csv, "stage1", width, &r1);
        log::info!("stage 2 ({width}): training the {} derivative generator", match kind {
            DerivativeKind::Sender => "sender-side",
            DerivativeKind::Receiver => "receiver-side",
        });
        let r2 = train_stage2(&mut params, &scenarios, kind, &s2)?;
        log_rows(&mut log_csv, "stage2", width, &r2);
        write_checkpoint(loaded, &out.join(format!("{width}.ckpt")), &params)?;
        println!(
            "trained {width} checkpoint: stage-1 loss {:.4}, stage-2 loss {:.4}",
            r1.final_loss().unwrap_or(f64::NAN),
            r2.final_loss().unwrap_or(f64::NAN)
        );
    }
    write_text(&out.join("train_log.csv"), &log_csv)?;
    Ok(())
}

pub fn cmd_sweep(loaded: &LoadedSpec, checkpoint_dir: &Path, out: &Path) -> Result<()> {
    let cfg = sweep_config(&loaded.spec, loaded.seed)?;
    let need_narrow = cfg.variants.iter().any(|v| !v.wide());
    let need_wide = cfg.variants.iter().any(|v| v.wide());
    // An unused checkpoint may be absent; init parameters stand in so the
    // borrow below stays simple.
    let narrow = if need_narrow {
        read_checkpoint(&checkpoint_dir.join("narrow.ckpt"), &loaded.sha256)?
    } else {
        init_params(&ModelSpec { codec: CodecWidth::Narrow }, loaded.spec.model.init_seed)
    };
    let wide = if need_wide {
        read_checkpoint(&checkpoint_dir.join("wide.ckpt"), &loaded.sha256)?
    } else {
        init_params(&ModelSpec { codec: CodecWidth::Wide }, loaded.spec.model.init_seed + 1)
    };
    let scenarios = scenario_set(loaded, EVAL_STREAM, loaded.spec.world.eval_scenarios);
    log::info!(
        "sweeping {} variants x {} latencies over {} scenarios",
        cfg.variants.len(),
        cfg.latencies_ms.len(),
        scenarios.len()
    );
    let result = run_sweep(&CheckpointSet { narrow: &narrow, wide: &wide }, &scenarios, &cfg)?;
    write_results(loaded, out, &result, &cfg.variants)?;
    print!("{}", result.to_csv());
    Ok(())
}

fn write_results(
    loaded: &LoadedSpec,
    out: &Path,
    result: &SweepResult,
    variants: &[Variant],
) -> Result<()> {
    fs::create_dir_all(out)?;
    write_text(&out.join("results.csv"), &(audit_preamble(loaded) + &result.to_csv()))?;
    for &v in variants {
        let path = out.join(format!("curve_{}.dat", v.tag()));
        write_text(&path, &(audit_preamble(loaded) + &result.gnuplot_series(v)))?;
    }
    Ok(())
}

pub fn cmd_verify(loaded: &LoadedSpec) -> Result<i32> {
    println!("spec {} seed {}", loaded.sha256, loaded.seed);
    let checks = verify::run_all(loaded.seed);
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<22} {}", c.name, c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    if failed == 0 {
        println!("all {} checks passed", checks.len());
        Ok(0)
    } else {
        println!("{failed} of {} checks failed", checks.len());
        Ok(3)
    }
}
