use log::{info, warn};

use super::{next_targets, probe_tasks, run, train_on, MemoryStore, Prepared, RunStore, TargetMode};
use crate::config::ExperimentConfig;
use crate::corpus::Utterance;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::formats::{decode_checkpoint, Report};
use crate::probes::ProbeKind;
use crate::targets::InitialKind;

/// The studied variable of a grid and its values.
#[derive(Clone, Debug, PartialEq)]
pub enum GridAxis {
    /// k of the clustered layer.
    Clusters(Vec<usize>),
    /// Clustered layer sets; a set of one is single-layer clustering.
    Layers(Vec<Vec<usize>>),
    /// Number of RVQ levels including the pinned one.
    RvqLevels(Vec<usize>),
    /// Initial target strategy of a full pipeline run.
    Strategies(Vec<InitialKind>),
}

impl GridAxis {
    pub fn name(&self) -> &'static str {
        match self {
            GridAxis::Clusters(_) => "clusters",
            GridAxis::Layers(_) => "layers",
            GridAxis::RvqLevels(_) => "rvq_levels",
            GridAxis::Strategies(_) => "strategies",
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            GridAxis::Clusters(v) | GridAxis::RvqLevels(v) => v.iter().map(|x| x.to_string()).collect(),
            GridAxis::Layers(v) => v.iter().map(|s| s.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("+")).collect(),
            GridAxis::Strategies(v) => v.iter().map(|k| k.as_str().to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `name` plus comma-separated values; layer sets join layers with `+`.
    pub fn parse(name: &str, values: &str) -> Result<Self> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Input(format!("grid value {s:?} is not a count")));
        let axis = match name {
            "clusters" => GridAxis::Clusters(items.iter().map(|s| num(s)).collect::<Result<_>>()?),
            "rvq_levels" => GridAxis::RvqLevels(items.iter().map(|s| num(s)).collect::<Result<_>>()?),
            "layers" => GridAxis::Layers(items.iter().map(|s| s.split('+').map(num).collect::<Result<Vec<_>>>()).collect::<Result<_>>()?),
            "strategies" => GridAxis::Strategies(
                items
                    .iter()
                    .map(|s| InitialKind::parse(s).ok_or_else(|| Error::Input(format!("unknown strategy {s:?}"))))
                    .collect::<Result<_>>()?,
            ),
            other => return Err(Error::Input(format!("unknown grid axis {other:?}"))),
        };
        if axis.is_empty() {
            return Err(Error::Input("grid axis has no values".into()));
        }
        Ok(axis)
    }

    fn needs_base(&self) -> bool {
        !matches!(self, GridAxis::Strategies(_))
    }
}

pub const GRID_COLUMNS: [&str; 7] = ["axis", "value", "iteration", "phone", "speaker", "denoise", "status"];

/// Iteration-2 encoder of a two-iteration run of `cfg`.
fn base_model(utts: &[Utterance], cfg: &ExperimentConfig) -> Result<Encoder<f32>> {
    let mut c = cfg.clone();
    c.pipeline.max_iterations = 2;
    let mut store = MemoryStore::default();
    let recs = run(utts, &c, &mut store)?;
    let last = recs.last().expect("at least one iteration");
    let bytes = store.get(&last.checkpoint)?.expect("persisted by run");
    Ok(decode_checkpoint(&bytes)?.encoder)
}

/// (iteration, metrics) of one grid cell.
fn cell(
    utts: &[Utterance],
    base_cfg: &ExperimentConfig,
    axis: &GridAxis,
    i: usize,
    base: Option<&Encoder<f32>>,
) -> Result<(usize, std::collections::BTreeMap<ProbeKind, f64>)> {
    let mut cfg = base_cfg.clone();
    match axis {
        GridAxis::Strategies(kinds) => {
            cfg.pipeline.initial.kind = kinds[i];
            let recs = run(utts, &cfg, &mut MemoryStore::default())?;
            let last = recs.last().expect("at least one iteration");
            return Ok((last.index, last.metrics.clone()));
        }
        GridAxis::Clusters(ks) => {
            cfg.pipeline.targets = TargetMode::Layer;
            cfg.pipeline.k = ks[i];
        }
        GridAxis::Layers(sets) => {
            if sets[i].len() == 1 {
                cfg.pipeline.targets = TargetMode::Layer;
                cfg.pipeline.cluster_layer = Some(sets[i][0]);
            } else {
                cfg.pipeline.targets = TargetMode::MultiLayer;
                cfg.pipeline.layers = sets[i].clone();
            }
        }
        GridAxis::RvqLevels(levels) => {
            cfg.pipeline.targets = TargetMode::Rvq;
            cfg.rvq.levels = levels[i];
        }
    }
    cfg.validate()?;
    let base = base.expect("base model prepared");
    let mut prep = Prepared::new(utts, &cfg)?;
    let (bundle, _, _, desc) = next_targets(&mut prep, &cfg, base, 3)?;
    info!("grid cell {}: {desc}", axis.labels()[i]);
    let (ckpt, _, _) = train_on(&prep, &cfg, &bundle)?;
    let (metrics, _) = probe_tasks(utts, &cfg, &ckpt.encoder)?;
    Ok((3, metrics))
}

/// One row per axis value. Cells that fail keep their row with the error in
/// the status column. Non-strategy axes cluster a shared iteration-2 model,
/// trained here unless `base` is given.
pub fn experiment_grid(utts: &[Utterance], cfg: &ExperimentConfig, axis: &GridAxis, base: Option<&Encoder<f32>>) -> Result<Report> {
    if axis.is_empty() {
        return Err(Error::Input("grid axis has no values".into()));
    }
    cfg.validate()?;
    let owned;
    let base = match (axis.needs_base(), base) {
        (false, _) => None,
        (true, Some(b)) => Some(b),
        (true, None) => {
            owned = base_model(utts, cfg)?;
            Some(&owned)
        }
    };
    let mut report = Report::new(&cfg.hash(), &GRID_COLUMNS);
    if let Some(b) = base {
        report.comments.push(format!("base model {}", b.params.hash_all()));
    }
    for (i, label) in axis.labels().into_iter().enumerate() {
        let mut row = vec![axis.name().to_string(), label];
        match cell(utts, cfg, axis, i, base) {
            Ok((iteration, metrics)) => {
                row.push(iteration.to_string());
                for kind in ProbeKind::ALL {
                    row.push(metrics.get(&kind).map_or_else(String::new, |v| v.to_string()));
                }
                row.push("ok".into());
            }
            Err(e) => {
                warn!("grid cell {} failed: {e}", row[1]);
                row.extend(["", "", "", ""].map(String::from));
                row.push(format!("error: {}", e.to_string().replace(['\t', '\n', '\r'], " ")));
            }
        }
        report.push_row(row)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        assert_eq!(
            GridAxis::parse("clusters", "100,500,2500,5000,10000,25000").unwrap(),
            GridAxis::Clusters(vec![100, 500, 2500, 5000, 10_000, 25_000])
        );
        assert_eq!(GridAxis::parse("layers", "3, 1+3").unwrap(), GridAxis::Layers(vec![vec![3], vec![1, 3]]));
        assert_eq!(GridAxis::parse("layers", "1+3").unwrap().labels(), vec!["1+3"]);
        assert_eq!(
            GridAxis::parse("strategies", "mfcc,random").unwrap(),
            GridAxis::Strategies(vec![InitialKind::MfccClusters, InitialKind::RandomModelClusters])
        );
        assert!(GridAxis::parse("clusters", "").is_err());
        assert!(GridAxis::parse("depth", "1").is_err());
        assert!(GridAxis::parse("strategies", "hubert").is_err());
    }
}
