//! One function per subcommand. Each writes its outputs plus a
//! `<command>.run.json` manifest and returns what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nriqa_core::evaluation::{self, Selection, Subject, TransferCell};
use nriqa_core::quality::defaults;
use nriqa_core::quality::training::{self, TrainingConfig};
use nriqa_core::study::{self, JndVerdict, SessionStore, StudySession, Visibility};
use nriqa_core::{
    attack, fidelity, imageio, synth, AttackConfig, CandidateSet, CandidateStatus, FidelityMeasure, ImageTensor,
    MeasureKind, ModelKind, QualityModel,
};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;

pub const SELECTION: &str = "selection.json";
pub const REPORT: &str = "report.tsv";

/// Outcome of screening one candidate set, stored next to its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    /// `simulated` or the id of the study session.
    pub origin: String,
    pub verdicts: Vec<JndVerdict>,
    pub candidate: Option<usize>,
}

impl SelectionRecord {
    pub fn load(set_dir: &Path) -> CliResult<Option<Self>> {
        let path = set_dir.join(SELECTION);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    fn write(&self, set_dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("selection serializes");
        fs::write(set_dir.join(SELECTION), text + "\n")?;
        Ok(())
    }
}

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Attack(a) => attack(&a).map(drop),
        Command::Enhance(a) => enhance(&a).map(drop),
        Command::Evaluate(a) => evaluate(&a).map(drop),
        Command::Serve(a) => crate::server::serve(&a),
        Command::Calibrate(a) => calibrate(&a).map(drop),
        Command::GenWeights(a) => gen_weights(&a).map(drop),
        Command::Synth(a) => synth(&a).map(drop),
        Command::Simulate(a) => simulate(&a).map(drop),
        Command::Select(a) => select(&a).map(drop),
    }
}

pub fn read_image(path: &Path) -> CliResult<ImageTensor> {
    imageio::load(path)
        .map(|x| x.quantized())
        .map_err(|e| CliError::usage(format!("cannot read image {}: {e}", path.display())))
}

pub fn load_set(dir: &Path) -> CliResult<CandidateSet> {
    CandidateSet::load(dir).map_err(|e| CliError::usage(format!("cannot read candidate set {}: {e}", dir.display())))
}

pub fn measure(kind: MeasureKind) -> CliResult<FidelityMeasure> {
    let extractor = if kind.needs_extractor() {
        Some(Arc::new(defaults::extractor()?))
    } else {
        None
    };
    Ok(FidelityMeasure::new(kind, extractor)?)
}

/// Directory name used to refer to a candidate set over HTTP and in logs.
pub fn set_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::environment(format!("cannot create {}: {e}", dir.display())))
}

pub fn attack(a: &AttackArgs) -> CliResult<CandidateSet> {
    let x0 = read_image(&a.image)?;
    let model = defaults::model(a.model)?;
    let fid = measure(a.measure)?;
    let mut cfg = AttackConfig::new(a.norm.unwrap_or(a.measure.ascent_norm()), a.seed);
    if !a.lambdas.is_empty() {
        cfg.lambdas = a.lambdas.clone();
    }
    cfg.gamma = a.gamma;
    cfg.iterations = a.iters;
    cfg.target = a.target;
    cfg.calibrated = !a.raw;
    cfg.validate().map_err(CliError::usage)?;

    let set = attack::run_sweep(&x0, &cfg, &model, &fid)?;
    create_out(&a.out)?;
    set.save(&a.out)?;

    let mut m = RunManifest::new("attack", a, Some(a.seed));
    m.input(&a.image)?;
    m.model_weights(a.model);
    m.measure_weights(a.measure);
    m.output(attack::MANIFEST);
    m.output(attack::INITIAL);
    for c in &set.candidates {
        m.output(c.file_name());
    }
    m.write(&a.out)?;

    println!("# {} / {}  q(x0) = {:.4}", set.model, set.measure, set.initial_quality);
    println!("index\tlambda\tD\tq\tdelta_q\tstatus");
    for c in &set.candidates {
        let status = match &c.status {
            CandidateStatus::Completed => "completed".to_string(),
            CandidateStatus::Stalled { iteration } => format!("stalled@{iteration}"),
            CandidateStatus::Failed { iteration, .. } => format!("failed@{iteration}"),
        };
        println!(
            "{}\t{:.4e}\t{:.6}\t{:.4}\t{:+.4}\t{status}",
            c.index, c.lambda, c.fidelity, c.quality, c.delta
        );
    }
    let failed: Vec<usize> = set
        .candidates
        .iter()
        .filter(|c| matches!(c.status, CandidateStatus::Failed { .. }))
        .map(|c| c.index)
        .collect();
    if !failed.is_empty() {
        return Err(CliError::numerical(format!("non-finite objective in candidates {failed:?}")));
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enhanced {
    pub image: ImageTensor,
    pub before: f64,
    pub after: f64,
    pub neg_ssim: f64,
}

pub fn enhance(a: &EnhanceArgs) -> CliResult<Enhanced> {
    let x0 = read_image(&a.image)?;
    let model = defaults::model(a.model)?;
    let image = attack::enhance(&x0, a.iters, a.gamma, a.norm, &model)?;
    let before = model.score(&x0)?;
    let after = model.score(&image)?;
    let neg_ssim = fidelity::neg_ssim(&image, &x0)?;
    let residual = evaluation::residual_map(&x0, &image, a.gain)?;

    create_out(&a.out)?;
    imageio::save_png(a.out.join("enhanced.png"), &image)?;
    imageio::save_png(a.out.join("residual.png"), &residual)?;
    let mut m = RunManifest::new("enhance", a, None);
    m.input(&a.image)?;
    m.model_weights(a.model);
    m.output("enhanced.png");
    m.output("residual.png");
    m.write(&a.out)?;

    println!("before\tafter\tneg_ssim");
    println!("{before:.4}\t{after:.4}\t{neg_ssim:.6}");
    Ok(Enhanced { image, before, after, neg_ssim })
}

/// `(path, value)` from lines of the form `path<TAB>value`, with paths
/// resolved against the file's directory.
pub fn read_scores(path: &Path) -> CliResult<Vec<(PathBuf, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || CliError::usage(format!("{}:{}: expected `image<TAB>score`", path.display(), n + 1));
        let (file, value) = line.rsplit_once(['\t', ' ']).ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        out.push((base.join(file.trim()), value));
    }
    Ok(out)
}

/// Numbers from the last field of every non-comment line.
pub fn read_numbers(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim().starts_with('#'))
        .map(|(n, l)| {
            l.split_whitespace()
                .last()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::usage(format!("{}:{}: expected a number", path.display(), n + 1)))
        })
        .collect()
}

pub struct Evaluation {
    pub cells: Vec<TransferCell>,
    pub report: String,
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<Evaluation> {
    let kinds: Vec<ModelKind> = if a.models.is_empty() {
        ModelKind::ALL.to_vec()
    } else {
        a.models.clone()
    };
    let models = kinds.iter().map(|&k| defaults::model(k)).collect::<Result<Vec<QualityModel>, _>>()?;

    let subjects = read_scores(&a.proxy_mos)?
        .into_iter()
        .map(|(path, mos)| {
            Ok(Subject {
                id: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                image: read_image(&path)?,
                mos,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut m = RunManifest::new("evaluate", a, None);
    m.input(&a.proxy_mos)?;
    for k in &kinds {
        m.model_weights(*k);
    }

    create_out(&a.out)?;
    let residual_dir = a.out.join("residuals");
    let mut measures = Vec::new();
    let mut selections = Vec::new();
    for dir in &a.sets {
        let set = load_set(dir)?;
        let subject = subjects.iter().find(|s| s.image == set.initial).ok_or_else(|| {
            CliError::usage(format!("{}: initial image matches no entry of {}", dir.display(), a.proxy_mos.display()))
        })?;
        m.input(&dir.join(attack::MANIFEST))?;
        if !measures.contains(&set.measure) {
            measures.push(set.measure);
        }
        let chosen = match SelectionRecord::load(dir)? {
            Some(r) => {
                m.input(&dir.join(SELECTION))?;
                r.candidate.and_then(|i| set.get(i)).map(|c| c.image.clone())
            }
            None => {
                log::warn!("{} has no {SELECTION}; its cells stay empty", dir.display());
                None
            }
        };
        if let Some(y) = &chosen {
            fs::create_dir_all(&residual_dir)?;
            let name = format!("{}_{}_{}.png", subject.id, set.model, set.measure);
            imageio::save_png(residual_dir.join(&name), &evaluation::residual_map(&set.initial, y, a.gain)?)?;
            m.output(format!("residuals/{name}"));
        }
        selections.push(Selection {
            subject: subject.id.clone(),
            source: set.model,
            measure: set.measure,
            counterexample: chosen,
        });
    }

    measures.sort_by_key(|m| MeasureKind::ALL.iter().position(|k| k == m));
    let cells = evaluation::transfer_matrix(&models, &measures, &subjects, &selections)?;
    let report = evaluation::report_tsv(&cells);
    fs::write(a.out.join(REPORT), &report)?;
    m.output(REPORT);
    m.write(&a.out)?;

    print!("{report}");
    let (intra, inter) = evaluation::intra_inter_means(&cells);
    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("# mean |dq| intra {} inter {}", show(intra), show(inter));
    Ok(Evaluation { cells, report })
}

pub fn calibrate(a: &CalibrateArgs) -> CliResult<nriqa_core::CalibrationParams> {
    let mut m = RunManifest::new("calibrate", a, None);
    m.input(&a.proxy_mos)?;
    let (raw, targets) = match &a.raw_scores {
        Some(path) => {
            m.input(path)?;
            (read_numbers(path)?, read_numbers(&a.proxy_mos)?)
        }
        None => {
            let model = defaults::model(a.model)?;
            m.model_weights(a.model);
            let pairs = read_scores(&a.proxy_mos)?;
            let raw = pairs
                .iter()
                .map(|(p, _)| Ok(model.raw_score(&read_image(p)?)?))
                .collect::<CliResult<Vec<_>>>()?;
            (raw, pairs.into_iter().map(|(_, v)| v).collect())
        }
    };
    if raw.len() != targets.len() {
        return Err(CliError::usage(format!("{} raw scores but {} targets", raw.len(), targets.len())));
    }
    let params = nriqa_core::quality::fit_calibration(&raw, &targets)?;
    create_out(&a.out)?;
    let name = format!("{}.calib", a.model.id());
    params.save(a.out.join(&name), a.model.id())?;
    m.output(name);
    m.write(&a.out)?;
    println!("beta3\tbeta4");
    println!("{:.6}\t{:.6}", params.beta3, params.beta4);
    Ok(params)
}

pub fn gen_weights(a: &GenWeightsArgs) -> CliResult<Vec<(String, Vec<u8>)>> {
    let cfg = TrainingConfig {
        seed: a.seed,
        ..TrainingConfig::default()
    };
    let files = training::train(&cfg)?.files();
    create_out(&a.out)?;
    let mut m = RunManifest::new("gen-weights", a, Some(a.seed));
    for (name, bytes) in &files {
        fs::write(a.out.join(name), bytes)?;
        m.output(name.clone());
        println!("{name}\t{}", crate::manifest::sha256_hex(bytes));
    }
    m.write(&a.out)?;
    Ok(files)
}

pub fn synth(a: &SynthArgs) -> CliResult<Vec<(String, f64)>> {
    let samples = synth::dataset(a.seed, a.count, a.size)?;
    create_out(&a.out)?;
    let mut m = RunManifest::new("synth", a, Some(a.seed));
    let mut tsv = String::from("# image\tproxy_mos\n");
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("img_{i:02}.png");
        imageio::save_png(a.out.join(&name), &s.distorted)?;
        tsv.push_str(&format!("{name}\t{:?}\n", s.mos));
        m.output(name.clone());
        rows.push((name, s.mos));
    }
    fs::write(a.out.join("mos.tsv"), &tsv)?;
    m.output("mos.tsv");
    m.write(&a.out)?;
    print!("{tsv}");
    Ok(rows)
}

fn finish_selection(dir: &Path, set: &CandidateSet, origin: String, verdicts: Vec<JndVerdict>) -> CliResult<SelectionRecord> {
    let candidate = study::select_counterexample(&verdicts, set).map(|c| c.index);
    println!("candidate\tresponses\tidentical\tbelow_jnd");
    for v in &verdicts {
        println!("{}\t{}\t{:.4}\t{}", v.candidate, v.responses, v.identical_fraction, v.below_jnd);
    }
    match candidate.and_then(|i| set.get(i)) {
        Some(c) => println!("# selected {} (lambda {:.4e}, D {:.6}, dq {:+.4})", c.index, c.lambda, c.fidelity, c.delta),
        None => println!("# no candidate below the JND"),
    }
    let record = SelectionRecord { origin, verdicts, candidate };
    record.write(dir)?;
    Ok(record)
}

pub fn simulate(a: &SimulateArgs) -> CliResult<SelectionRecord> {
    let set = load_set(&a.set)?;
    let name = set_name(&a.set);
    let mut session = StudySession::for_set("simulated".into(), name, &set, a.repetitions, a.seed)?;
    let tau = match a.tau {
        Some(t) => t,
        None => set
            .candidates
            .iter()
            .map(|c| c.fidelity)
            .min_by(f64::total_cmp)
            .ok_or_else(|| CliError::usage("empty candidate set"))?,
    };
    if !(0.0..=1.0).contains(&a.eta) {
        return Err(CliError::usage(format!("flip rate must lie in [0, 1], got {}", a.eta)));
    }
    let distance = |i: usize| set.get(i).map_or(f64::INFINITY, |c| c.fidelity);
    let vis = Visibility { tau, eta: a.eta };
    for r in study::simulate_observer(&session, distance, vis, "simulated", a.seed) {
        session.record_response(r)?;
    }
    let verdicts = session.verdicts()?;

    let mut m = RunManifest::new("simulate", a, Some(a.seed));
    m.input(&a.set.join(attack::MANIFEST))?;
    m.output(SELECTION);
    let record = finish_selection(&a.set, &set, "simulated".into(), verdicts)?;
    m.write(&a.set)?;
    Ok(record)
}

pub fn select(a: &SelectArgs) -> CliResult<SelectionRecord> {
    let set = load_set(&a.set)?;
    if !a.log.exists() {
        return Err(CliError::usage(format!("no session log at {}", a.log.display())));
    }
    let store = SessionStore::open(&a.log)?;
    let session = store
        .get(&a.session)
        .ok_or_else(|| CliError::usage(format!("no session {} in {}", a.session, a.log.display())))?;
    let session = session.lock().expect("session lock").clone();
    let name = set_name(&a.set);
    if session.header.candidate_set != name {
        return Err(CliError::usage(format!(
            "session {} screens {:?}, not {name:?}",
            a.session, session.header.candidate_set
        )));
    }
    let verdicts = session.verdicts()?;
    let mut m = RunManifest::new("select", a, None);
    m.input(&a.set.join(attack::MANIFEST))?;
    m.input(&a.log)?;
    m.output(SELECTION);
    let record = finish_selection(&a.set, &set, a.session.clone(), verdicts)?;
    m.write(&a.set)?;
    Ok(record)
}
