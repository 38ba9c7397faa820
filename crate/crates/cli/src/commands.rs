//! The subcommands, callable without the argument parser.

use std::fs;
use std::path::{Path, PathBuf};

use prompt_ttt_core::model::Component;
use prompt_ttt_core::protocol::{self, EvalMode, EvalReport};
use prompt_ttt_core::rng::{self, tags};
use prompt_ttt_core::synth::{self, VideoSequence};
use prompt_ttt_core::trainer::{self, Fitted};
use prompt_ttt_core::ttt::TttConfig;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{self, ExperimentConfig};
use crate::dataset::{self, Dataset};
use crate::error::{CliError, CliResult};
use crate::report::{self, Table, TraceRow};

pub const LEAKAGE_LOG: &str = "leakage.log";

fn mkdir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

/// Seed of the `i`-th generated video.
pub fn video_seed(seed: u64, i: usize) -> u64 {
    rng::derive_path(seed, &[tags::SCENE, i as u64])
}

/// Generates the source videos, the split and the shifted test copies.
pub fn build_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let ds = cfg.arch.downsample();
    let videos = (0..cfg.synth.n_videos)
        .map(|i| synth::generate_video(video_seed(cfg.seed, i), &cfg.synth.scene, ds))
        .collect::<Result<Vec<_>, _>>()?;
    let split = synth::split_dataset(videos.len(), cfg.seed)?;
    Ok(dataset::assemble(cfg.seed, videos, split, &cfg.synth.shift))
}

pub fn synth(cfg: &ExperimentConfig, out: &Path) -> CliResult<Dataset> {
    let d = build_dataset(cfg)?;
    mkdir(out)?;
    dataset::save_dataset(out, &d)?;
    config::echo(out, cfg)?;
    eprintln!(
        "[synth] {} videos ({} train, {} test, {} shifted) written to {}",
        d.source.len(),
        d.manifest.split.train.len(),
        d.manifest.split.test.len(),
        d.target.len(),
        out.display()
    );
    Ok(d)
}

pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> CliResult<Fitted> {
    let d = dataset::load_dataset(data)?;
    let videos = d.train_videos();
    let fitted = trainer::fit_with(&videos, &cfg.arch, &cfg.trainer, &mut |e| {
        eprintln!("[train] epoch {:>3} l_train {:.5} lr {}", e.epoch, e.l_train, e.lr);
    })?;
    mkdir(out)?;
    let ck = Checkpoint { params: fitted.params.clone(), optimizer: fitted.optimizer.clone(), config: cfg.to_value() };
    checkpoint::save(out, &ck)?;
    report::history_table(&fitted.history).write(&out.join(report::HISTORY_CSV))?;
    config::echo(out, cfg)?;
    eprintln!("[train] checkpoint written to {}", out.display());
    Ok(fitted)
}

/// Parses `none,prompt_ttt` style lists.
pub fn parse_modes(s: &str) -> CliResult<Vec<EvalMode>> {
    let modes = s.split(',').map(|m| EvalMode::from_name(m.trim())).collect::<Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        return Err(CliError::Usage("no eval mode given".into()));
    }
    Ok(modes)
}

pub fn parse_counts(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|n| n.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("{n:?} is not a prompt count"))))
        .collect()
}

fn eval_videos(cfg: &ExperimentConfig, d: &Dataset) -> Vec<VideoSequence> {
    if cfg.eval.shifted {
        d.target.clone()
    } else {
        d.test_videos()
    }
}

/// Runs one protocol and checks that every video started from `pristine`.
fn run_checked(
    videos: &[VideoSequence],
    ck: &Checkpoint,
    mode: EvalMode,
    ttt: &TttConfig,
    cfg: &ExperimentConfig,
    label: &str,
    log: &mut Vec<String>,
) -> CliResult<EvalReport> {
    let pristine = ck.params.digest(&Component::Encoder);
    let mut leaked = Vec::new();
    let rep = protocol::run_eval_with(videos, &ck.params, mode, ttt, &cfg.eval.protocol(), &mut |i, o| {
        let ok = o.start_encoder == pristine;
        let line = format!(
            "{label} video {i}: start encoder {} {} checkpoint {}; final encoder {}",
            o.start_encoder,
            if ok { "==" } else { "!=" },
            pristine,
            o.final_encoder
        );
        eprintln!("[eval] {label} video {i}: start encoder {} pristine={ok}", &o.start_encoder[..16]);
        log.push(line);
        if !ok {
            leaked.push(i);
        }
    })?;
    if !leaked.is_empty() {
        return Err(CliError::Internal(format!("{label}: videos {leaked:?} did not start from the checkpoint encoder")));
    }
    Ok(rep)
}

fn write_run(dir: &Path, rep: &EvalReport, method: &str, seed: u64) -> CliResult<()> {
    mkdir(dir)?;
    report::metrics_table(&rep.records, seed).write(&dir.join(report::METRICS_CSV))?;
    report::per_anatomy_table(&[(method.to_string(), &rep.table)]).write(&dir.join(report::PER_ANATOMY_CSV))?;
    let traces: Vec<TraceRow<'_>> =
        rep.videos.iter().enumerate().filter_map(|(video, o)| o.trace.as_ref().map(|trace| TraceRow { video, trace })).collect();
    if !traces.is_empty() {
        report::trace_table(&traces).write(&dir.join(report::TRACE_CSV))?;
    }
    Ok(())
}

fn render(title: &str, sections: &[(&str, &Table)]) -> String {
    let mut md = format!("# {title}\n");
    for (h, t) in sections {
        md.push_str(&format!("\n## {h}\n\n{}", t.markdown()));
    }
    md
}

pub fn eval(cfg: &ExperimentConfig, checkpoint_path: &Path, data: &Path, out: &Path) -> CliResult<Vec<EvalReport>> {
    let ck = checkpoint::load(checkpoint_path)?;
    let d = dataset::load_dataset(data)?;
    let videos = eval_videos(cfg, &d);
    mkdir(out)?;
    let mut log = Vec::new();
    let mut reports = Vec::new();
    for &mode in &cfg.eval.modes {
        let rep = run_checked(&videos, &ck, mode, &cfg.ttt, cfg, mode.name(), &mut log)?;
        write_run(&out.join(mode.name()), &rep, mode.name(), cfg.seed)?;
        eprintln!("[eval] {}: mean dsc {:.4}", mode.name(), rep.table.average().dsc);
        reports.push(rep);
    }
    let named: Vec<(String, &_)> = reports.iter().map(|r| (r.mode.name().to_string(), &r.table)).collect();
    let comparison = report::comparison_table(&named, cfg.seed);
    let per_anatomy = report::per_anatomy_table(&named);
    comparison.write(&out.join(report::COMPARISON_CSV))?;
    per_anatomy.write(&out.join(report::PER_ANATOMY_CSV))?;
    let md = render("Evaluation", &[("Summary per method", &comparison), ("Per-anatomy results", &per_anatomy)]);
    report::write_text(&out.join(report::REPORT_MD), &md)?;
    report::write_text(&out.join(LEAKAGE_LOG), &(log.join("\n") + "\n"))?;
    config::echo(out, cfg)?;
    Ok(reports)
}

pub fn ablate_prompts(cfg: &ExperimentConfig, checkpoint_path: &Path, data: &Path, out: &Path) -> CliResult<Vec<(usize, EvalReport)>> {
    let ck = checkpoint::load(checkpoint_path)?;
    let d = dataset::load_dataset(data)?;
    let videos = eval_videos(cfg, &d);
    mkdir(out)?;
    let mut log = Vec::new();
    let mut reports = Vec::new();
    for &n in &cfg.eval.ablation_n_points {
        // Only the prompt count varies; the seed, budget and views stay fixed.
        let ttt = TttConfig { n_points: n, ..cfg.ttt.clone() };
        let label = format!("n_points={n}");
        let rep = run_checked(&videos, &ck, EvalMode::PromptTtt, &ttt, cfg, &label, &mut log)?;
        write_run(&out.join(format!("n_{n}")), &rep, EvalMode::PromptTtt.name(), cfg.seed)?;
        eprintln!("[ablate] n={n}: mean dsc {:.4}", rep.table.average().dsc);
        reports.push((n, rep));
    }
    let rows: Vec<(usize, &_)> = reports.iter().map(|(n, r)| (*n, &r.table)).collect();
    let table = report::ablation_table(&rows, cfg.seed);
    table.write(&out.join(report::ABLATION_CSV))?;
    let mut md = render("Prompt-count ablation", &[("Number of point prompts", &table)]);
    md.push_str("\nreference_dsc is the published value for each prompt count, shown for orientation only.\n");
    report::write_text(&out.join(report::REPORT_MD), &md)?;
    report::write_text(&out.join(LEAKAGE_LOG), &(log.join("\n") + "\n"))?;
    config::echo(out, cfg)?;
    Ok(reports)
}

pub fn report(dirs: &[PathBuf], out: Option<&Path>) -> CliResult<String> {
    let md = report::merge_runs(dirs)?;
    if let Some(p) = out {
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            mkdir(parent)?;
        }
        report::write_text(p, &md)?;
    }
    Ok(md)
}
