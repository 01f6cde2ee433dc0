use std::path::Path;

use log::info;
use maskpred::config::ExperimentConfig;
use maskpred::corpus::{generate, Utterance};
use maskpred::dsp::FeatureKind;
use maskpred::encoder::{corpus_features, Encoder};
use maskpred::formats::{
    decode_checkpoint, decode_codebook, decode_targets, encode_checkpoint, encode_codebook, encode_rvq, encode_targets,
    Checkpoint, Report, TensorData,
};
use maskpred::heads::{HeadMode, HeadStack};
use maskpred::kmeans::{self, KmeansConfig, Source};
use maskpred::pipeline::{self, experiment_grid, GridAxis, IterationRecord, TargetMode, GRID_COLUMNS};
use maskpred::probes::{layer_weight_report, probe_train, ProbeData, ProbeKind};
use maskpred::rvq::{self, RvqConfig, RvqModel};
use maskpred::targets::{initial_targets, rvq_targets, InitialKind, TargetBundle, TargetContext, TargetStream};
use maskpred::train::train_masked;
use maskpred::{Error, Result};

use crate::files::{self, DirStore};
use crate::{Cli, Command, Common};

const CONFIG_FILE: &str = "config.txt";

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_text(&files::read_text(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpus(c: &Common, cfg: &ExperimentConfig) -> Result<Vec<Utterance>> {
    let utts = match &c.manifest {
        Some(m) => files::load_corpus(m)?,
        None => generate(&cfg.corpus)?,
    };
    if utts.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    info!("corpus: {} utterances", utts.len());
    Ok(utts)
}

fn put(out: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let p = out.join(name);
    files::write(&p, bytes)?;
    info!("wrote {}", p.display());
    Ok(())
}

fn put_report(out: &Path, name: &str, r: &Report) -> Result<()> {
    put(out, name, r.to_tsv()?.as_bytes())
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&files::read(p)?).map_err(|e| files::io_err(p, e))
}

fn load_targets(p: &Path) -> Result<TargetBundle> {
    decode_targets(&files::read(p)?).map_err(|e| files::io_err(p, e))
}

fn parse_tasks(s: &str) -> Result<Vec<ProbeKind>> {
    if s == "all" {
        return Ok(ProbeKind::ALL.to_vec());
    }
    s.split(',').map(|t| ProbeKind::parse(t.trim()).ok_or_else(|| Error::Input(format!("unknown probe task {t:?}")))).collect()
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = load_config(c)?;
    if let Command::GenCorpus = cli.command {
        if let Some(seed) = c.seed {
            cfg.corpus.seed = seed;
        }
    }
    match &cli.command {
        Command::PipelineRun { .. } | Command::Report { .. } => {}
        _ => put(&c.out, CONFIG_FILE, cfg.to_text().as_bytes())?,
    }
    let out = c.out.as_path();
    match &cli.command {
        Command::GenCorpus => {
            let utts = generate(&cfg.corpus)?;
            files::save_corpus(out, &utts)?;
            info!("wrote {} utterances to {}", utts.len(), out.display());
        }
        Command::ExtractFeatures { kind } => {
            let kind = FeatureKind::parse(kind).ok_or_else(|| Error::Input(format!("unknown feature kind {kind:?}")))?;
            let utts = corpus(c, &cfg)?;
            let feats = corpus_features(&utts, &cfg.dsp, kind)?;
            for (u, f) in utts.iter().zip(&feats) {
                files::save_tensor(&out.join("features").join(format!("{}.mtl", u.id)), &files::feature_tensor(f)?)?;
            }
            info!("wrote {} feature files", feats.len());
        }
        Command::TrainInitial { strategy, k } => {
            let mut s = cfg.pipeline.initial.clone();
            if let Some(name) = strategy {
                s.kind = InitialKind::parse(name).ok_or_else(|| Error::Input(format!("unknown strategy {name:?}")))?;
            }
            if let Some(k) = k {
                s.k = *k;
            }
            let utts = corpus(c, &cfg)?;
            let ctx = TargetContext { utts: &utts, dsp: &cfg.dsp, enc: &cfg.encoder, train: &cfg.train, kmeans: &cfg.kmeans };
            let init = initial_targets(&ctx, &s)?;
            put(out, "codebook.cdbk", &encode_codebook(&init.codebook))?;
            put(out, "targets.tgts", &encode_targets(&init.bundle))?;
            if let Some(model) = init.model {
                put(out, "initial.ckpt", &encode_checkpoint(&Checkpoint { encoder: model, heads: None }))?;
            }
        }
        Command::KmeansFit { input, k, kind, layer } => {
            let kind = FeatureKind::parse(kind).ok_or_else(|| Error::Input(format!("unknown feature kind {kind:?}")))?;
            let source = match layer {
                Some(l) => Source { kind: FeatureKind::Layer, layer: Some(*l), iteration: 0 },
                None => Source { kind, layer: None, iteration: 0 },
            };
            kmeans_fit(out, &cfg, input, *k, source)?
        }
        Command::MakeTargets { codebook, checkpoint } => {
            let utts = corpus(c, &cfg)?;
            let model = checkpoint.as_deref().map(load_checkpoint).transpose()?.map(|ck| ck.encoder);
            let mut streams = Vec::new();
            for p in codebook {
                let cb = decode_codebook(&files::read(p)?).map_err(|e| files::io_err(p, e))?;
                let (feats, name, layer) = match cb.source.layer {
                    Some(l) => {
                        let m = model.as_ref().ok_or_else(|| Error::Input(format!("{} clusters layer {l}; pass --checkpoint", p.display())))?;
                        let inputs = corpus_features(&utts, &cfg.dsp, m.cfg.input_kind)?;
                        (m.extract_layer_features(&inputs, l, FeatureKind::Layer)?, format!("L{l}"), l)
                    }
                    None => (corpus_features(&utts, &cfg.dsp, cb.source.kind)?, cb.source.kind.as_str().to_string(), 0),
                };
                let ids = kmeans::targets_for_corpus(&feats, &cb)?;
                streams.push(TargetStream { name, ids, vocab_size: cb.k, layer_or_level: layer });
            }
            let bundle = TargetBundle { streams };
            bundle.validate(None)?;
            put(out, "targets.tgts", &encode_targets(&bundle))?;
        }
        Command::Train { targets, head_mode } => {
            let bundle = load_targets(targets)?;
            let mode = match head_mode {
                Some(m) => HeadMode::parse(m).ok_or_else(|| Error::Input(format!("unknown head mode {m:?}")))?,
                None if bundle.n_streams() == 1 => HeadMode::Single,
                None => cfg.pipeline.head_mode,
            };
            let utts = corpus(c, &cfg)?;
            let inputs = corpus_features(&utts, &cfg.dsp, cfg.encoder.input_kind)?;
            let mut enc = Encoder::<f32>::new(cfg.encoder.clone())?;
            enc.fit_input_stats(&inputs)?;
            let mut heads = HeadStack::<f32>::new(mode, &bundle.vocab_sizes(), enc.cfg.d_model, cfg.encoder.seed)?;
            let log = train_masked(&mut enc, &mut heads, &inputs, &bundle, &cfg.train)?;
            let mut r = Report::new(&cfg.hash(), &["epoch", "loss"]);
            for (i, l) in log.epoch_loss.iter().enumerate() {
                r.push_row(vec![(i + 1).to_string(), l.to_string()])?;
            }
            put(out, "model.ckpt", &encode_checkpoint(&Checkpoint { encoder: enc, heads: Some(heads) }))?;
            put_report(out, "train_loss.tsv", &r)?;
        }
        Command::DumpLayers { checkpoint, layers } => {
            let enc = load_checkpoint(checkpoint)?.encoder;
            let layers = if layers.is_empty() { (0..=enc.cfg.n_layers).collect() } else { layers.clone() };
            if let Some(&bad) = layers.iter().find(|&&l| l > enc.cfg.n_layers) {
                return Err(Error::Input(format!("layer {bad} outside 0..={}", enc.cfg.n_layers)));
            }
            let utts = corpus(c, &cfg)?;
            let inputs = corpus_features(&utts, &cfg.dsp, enc.cfg.input_kind)?;
            let hidden = enc.all_layers(&inputs)?;
            for (u, h) in utts.iter().zip(&hidden) {
                for &l in &layers {
                    files::save_tensor(&out.join("layers").join(format!("L{l}")).join(format!("{}.mtl", u.id)), &TensorData::F32(h[l].clone()))?;
                }
            }
            info!("wrote layers {layers:?} for {} utterances", utts.len());
        }
        Command::RvqTrain { targets, levels } => rvq_train(c, out, &cfg, targets.as_deref(), *levels)?,
        Command::Probe { checkpoint, task } => {
            let tasks = parse_tasks(task)?;
            let enc = load_checkpoint(checkpoint)?.encoder;
            let utts = corpus(c, &cfg)?;
            let data = ProbeData::build(&enc, &utts, &cfg.dsp)?;
            let mut metrics = Report::new(&cfg.hash(), &["task", "metric"]);
            let mut weights = Vec::new();
            for t in tasks {
                let o = probe_train(&data, t, &cfg.probe)?;
                info!("probe {}: {:.4}", t.as_str(), o.metric);
                metrics.push_row(vec![t.as_str().into(), o.metric.to_string()])?;
                weights.push((t, o.weights));
            }
            put_report(out, "probe.tsv", &metrics)?;
            put_report(out, "layer_weights.tsv", &layer_weight_report(&weights, &cfg.hash())?)?;
        }
        Command::PipelineRun { max_iterations, targets } => {
            if let Some(m) = max_iterations {
                cfg.pipeline.max_iterations = *m;
            }
            if let Some(t) = targets {
                cfg.pipeline.targets = TargetMode::parse(t).ok_or_else(|| Error::Input(format!("unknown target mode {t:?}")))?;
            }
            cfg.validate()?;
            let mut store = DirStore::open(out)?;
            let cfg_path = out.join(CONFIG_FILE);
            if cfg_path.exists() {
                let previous = ExperimentConfig::from_text(&files::read_text(&cfg_path)?)?;
                if previous.hash() != cfg.hash() {
                    return Err(Error::Config(format!("{} holds a run with a different config", out.display())));
                }
            } else {
                put(out, CONFIG_FILE, cfg.to_text().as_bytes())?;
            }
            let utts = corpus(c, &cfg)?;
            let recs = pipeline::run(&utts, &cfg, &mut store)?;
            put_report(out, "summary.tsv", &summary(&recs, &cfg.hash())?)?;
        }
        Command::Grid { axis, values, base } => {
            let axis = GridAxis::parse(axis, values)?;
            let base = base.as_deref().map(load_checkpoint).transpose()?.map(|ck| ck.encoder);
            let utts = corpus(c, &cfg)?;
            let r = experiment_grid(&utts, &cfg, &axis, base.as_ref())?;
            put_report(out, "grid.tsv", &r)?;
        }
        Command::Report { run } => put_report(out, "report.tsv", &report(run)?)?,
    }
    Ok(())
}

fn kmeans_fit(out: &Path, cfg: &ExperimentConfig, input: &[std::path::PathBuf], k: Option<usize>, source: Source) -> Result<()> {
    let mut points: Vec<f64> = Vec::new();
    let mut dim = None;
    for p in files::tensor_paths(input)? {
        let t = files::load_tensor(&p)?;
        let shape = t.shape().to_vec();
        let cols = match shape[..] {
            [_, c] => c,
            [_] => 1,
            _ => return Err(files::io_err(&p, format!("expected a matrix, got shape {shape:?}"))),
        };
        if *dim.get_or_insert(cols) != cols {
            return Err(files::io_err(&p, format!("{cols} columns where {} were expected", dim.unwrap())));
        }
        match t {
            TensorData::F32(t) => points.extend(t.data().iter().map(|&v| v as f64)),
            TensorData::F64(t) => points.extend_from_slice(t.data()),
            TensorData::U32 { data, .. } => points.extend(data.iter().map(|&v| v as f64)),
        }
    }
    let dim = dim.expect("at least one tensor");
    let km = KmeansConfig { k: k.unwrap_or(cfg.kmeans.k), ..cfg.kmeans.clone() };
    let mut cb = kmeans::fit(&points, dim, &km)?;
    cb.source = source;
    info!("k-means: {} points, k {}, inertia {:.6}", points.len() / dim, cb.k, cb.inertia);
    put(out, "codebook.cdbk", &encode_codebook(&cb))
}

fn rvq_train(c: &Common, out: &Path, cfg: &ExperimentConfig, targets: Option<&Path>, levels: Option<usize>) -> Result<()> {
    let bundle = targets.map(load_targets).transpose()?;
    let utts = corpus(c, cfg)?;
    let logmel = corpus_features(&utts, &cfg.dsp, FeatureKind::Logmel)?;
    let mut rcfg = RvqConfig { d_in: logmel[0].dims, ..cfg.rvq.clone() };
    if let Some(l) = levels {
        rcfg.levels = l;
    }
    let first = bundle.as_ref().map(|b| &b.streams[0]);
    if let Some(s) = first {
        rcfg.k1 = s.vocab_size;
    }
    if rcfg.pinned && first.is_none() {
        return Err(Error::Input("a pinned quantizer needs --targets".into()));
    }
    let mut model = RvqModel::new(rcfg)?;
    let names: Vec<String> = utts.iter().map(|u| u.id.clone()).collect();
    let pinned = first.filter(|_| model.cfg.pinned).map(|s| s.ids.as_slice());
    let log = rvq::train(&mut model, &names, &logmel, pinned, cfg.pipeline.rvq_epochs)?;
    info!("rvq: {} epochs, final loss {:?}", log.train_loss.len(), log.train_loss.last());
    let (frames, _) = kmeans::stack(&logmel)?;
    let ids: Option<Vec<u32>> = pinned.map(|p| p.iter().flatten().copied().collect());
    let mse = model.mse_by_levels(&frames, ids.as_deref())?;
    let mut r = Report::new(&cfg.hash(), &["levels", "mse"]);
    for (l, v) in mse.iter().enumerate() {
        r.push_row(vec![(l + 1).to_string(), v.to_string()])?;
    }
    put(out, "model.rvqm", &encode_rvq(&model))?;
    put_report(out, "rvq_mse.tsv", &r)?;
    if let Some(s) = first {
        let b = rvq_targets(&model, &logmel, s, model.cfg.levels)?;
        put(out, "targets.tgts", &encode_targets(&b))?;
    }
    Ok(())
}

const SUMMARY_COLUMNS: [&str; 7] = ["iteration", "strategy", "phone", "speaker", "denoise", "final_loss", "converged"];

fn summary(recs: &[IterationRecord], hash: &str) -> Result<Report> {
    let mut r = Report::new(hash, &SUMMARY_COLUMNS);
    for rec in recs {
        let mut row = vec![rec.index.to_string(), rec.strategy.clone()];
        for k in ProbeKind::ALL {
            row.push(rec.metrics.get(&k).map_or_else(String::new, |v| v.to_string()));
        }
        row.push(rec.train_loss.last().map_or_else(String::new, |v| v.to_string()));
        row.push(rec.converged.to_string());
        r.push_row(row)?;
    }
    Ok(r)
}

/// Pipeline runs are summarised from their iteration records; grid runs are
/// re-read and checked.
fn report(run: &Path) -> Result<Report> {
    let grid = run.join("grid.tsv");
    if grid.exists() {
        let r = Report::parse(&files::read_text(&grid)?).map_err(|e| files::io_err(&grid, e))?;
        if r.columns != GRID_COLUMNS {
            return Err(files::io_err(&grid, "not a grid report"));
        }
        return Ok(r);
    }
    let cfg = ExperimentConfig::from_text(&files::read_text(&run.join(CONFIG_FILE))?)?;
    let mut recs = Vec::new();
    for i in 1.. {
        let p = run.join(pipeline::iter_dir(i)).join("metrics.json");
        if !p.exists() {
            break;
        }
        recs.push(IterationRecord::from_json(&files::read_text(&p)?)?);
    }
    if recs.is_empty() {
        return Err(Error::Input(format!("{} holds neither grid.tsv nor iteration records", run.display())));
    }
    summary(&recs, &cfg.hash())
}
