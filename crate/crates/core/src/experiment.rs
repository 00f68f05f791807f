//! Experiment grid: formats × sort flag × seeds over one head.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ksort::{plan_head, HeadWeights, SortOrder};
use crate::rope::{default_rope_tables, RopeLayout, RopeTables, DEFAULT_ROPE_BASE};
use crate::sim::{
    cache_metrics, gen_activations, gen_outlier_head, serialize_extended_f64, simulate_decode,
    CacheFormat, OutlierSpec,
};
use crate::tensorio;

/// One row of the format grid: query format and key cache format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatPair {
    pub format_q: CacheFormat,
    pub format_k: CacheFormat,
}

impl FormatPair {
    pub fn new(format_q: CacheFormat, format_k: CacheFormat) -> Self {
        Self { format_q, format_k }
    }
}

/// Lossless baseline, then BFP16 queries with BFP12 keys at blocks 128, 64, 32.
pub fn default_grid() -> Vec<FormatPair> {
    use crate::bfp::BfpFormat as F;
    let mut grid = vec![FormatPair::new(CacheFormat::Float, CacheFormat::Float)];
    for (q, k) in [
        (F::BFP16_128, F::BFP12_128),
        (F::BFP16_64, F::BFP12_64),
        (F::BFP16_32, F::BFP12_32),
    ] {
        grid.push(FormatPair::new(CacheFormat::Bfp(q), CacheFormat::Bfp(k)));
    }
    grid
}

/// Where the head's projections come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightSource {
    /// Generated per seed; the seed also drives the activations.
    Synthetic {
        #[serde(default = "default_n_outliers")]
        n_outlier_channels: usize,
        #[serde(default = "default_outlier_scale")]
        outlier_scale: f64,
        #[serde(default = "default_base_std")]
        base_std: f64,
    },
    /// Two 2-d tensor files, `head_dim × model_dim`; seeds drive the activations only.
    Import { wk: PathBuf, wq: PathBuf },
}

fn default_n_outliers() -> usize {
    4
}

fn default_outlier_scale() -> f64 {
    50.0
}

fn default_base_std() -> f64 {
    0.02
}

impl Default for WeightSource {
    fn default() -> Self {
        WeightSource::Synthetic {
            n_outlier_channels: default_n_outliers(),
            outlier_scale: default_outlier_scale(),
            base_std: default_base_std(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RopeConfig {
    pub enabled: bool,
    pub layout: RopeLayout,
    pub base: f64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            layout: RopeLayout::HalfSplit,
            base: DEFAULT_ROPE_BASE,
        }
    }
}

/// JSON experiment description. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub head_dim: usize,
    pub model_dim: usize,
    pub tokens: usize,
    pub weights: WeightSource,
    pub grid: Vec<FormatPair>,
    pub order: SortOrder,
    pub rope: RopeConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            head_dim: 128,
            model_dim: 256,
            tokens: 64,
            weights: WeightSource::default(),
            grid: default_grid(),
            order: SortOrder::Ascending,
            rope: RopeConfig::default(),
            seeds: (0..20).collect(),
            out_dir: PathBuf::from("report"),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file; relative import paths are taken relative to it.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if let WeightSource::Import { wk, wq } = &mut cfg.weights {
            let dir = path.parent().unwrap_or(Path::new(""));
            for p in [wk, wq] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.head_dim == 0 || self.model_dim == 0 {
            return bad(format!(
                "head_dim {} and model_dim {} must be positive",
                self.head_dim, self.model_dim
            ));
        }
        if self.tokens == 0 {
            return bad("tokens must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.grid.is_empty() {
            return bad("grid must not be empty".into());
        }
        if let WeightSource::Synthetic {
            n_outlier_channels,
            outlier_scale,
            base_std,
        } = self.weights
        {
            if n_outlier_channels > self.head_dim {
                return bad(format!(
                    "{n_outlier_channels} outlier channels for head_dim {}",
                    self.head_dim
                ));
            }
            if !(outlier_scale >= 1.0 && outlier_scale.is_finite()) {
                return bad(format!(
                    "outlier_scale {outlier_scale} must be finite and at least 1"
                ));
            }
            if !(base_std > 0.0 && base_std.is_finite()) {
                return bad(format!("base_std {base_std} must be finite and positive"));
            }
        }
        if self.rope.enabled {
            self.rope_tables()?;
        }
        Ok(())
    }

    fn rope_tables(&self) -> Result<Option<RopeTables>> {
        if !self.rope.enabled {
            return Ok(None);
        }
        default_rope_tables(self.head_dim, self.rope.base, self.rope.layout)
            .map(Some)
            .map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// Result of one (format pair, sort flag, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub format_q: CacheFormat,
    pub format_k: CacheFormat,
    pub block_size: Option<usize>,
    pub sorted: bool,
    pub order: SortOrder,
    pub seed: u64,
    pub mse: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub sqnr_db: f64,
    pub sqnr_defined: bool,
    pub max_abs_err: f64,
    pub logits_max_abs_err: f64,
    pub bits_per_element: f64,
}

fn load_imported(cfg: &ExperimentConfig, wk: &Path, wq: &Path) -> Result<HeadWeights> {
    let w = HeadWeights::new(tensorio::load_matrix(wk)?, tensorio::load_matrix(wq)?)?;
    if w.head_dim() != cfg.head_dim || w.model_dim() != cfg.model_dim {
        return Err(Error::InvalidConfig(format!(
            "imported weights are {}x{}, config says head_dim {} and model_dim {}",
            w.head_dim(),
            w.model_dim(),
            cfg.head_dim,
            cfg.model_dim
        )));
    }
    Ok(w)
}

fn run_seed(
    cfg: &ExperimentConfig,
    imported: Option<&HeadWeights>,
    rope: Option<&RopeTables>,
    seed: u64,
) -> Result<Vec<ErrorReport>> {
    let generated;
    let weights = match (&cfg.weights, imported) {
        (_, Some(w)) => w,
        (
            WeightSource::Synthetic {
                n_outlier_channels,
                outlier_scale,
                base_std,
            },
            None,
        ) => {
            let spec = OutlierSpec {
                n_outlier_channels: *n_outlier_channels,
                outlier_scale: *outlier_scale,
                base_std: *base_std,
                seed,
            };
            generated = gen_outlier_head(cfg.head_dim, cfg.model_dim, &spec)?;
            &generated
        }
        (WeightSource::Import { .. }, None) => unreachable!("imported weights are loaded up front"),
    };
    let x = gen_activations(cfg.tokens, cfg.model_dim, seed);
    let plan = plan_head(weights, rope, cfg.order)?;
    let mut out = Vec::with_capacity(cfg.grid.len() * 2);
    for pair in &cfg.grid {
        for sorted in [false, true] {
            let cell = || {
                format!(
                    "{}/{} sorted={sorted} seed={seed}",
                    pair.format_q, pair.format_k
                )
            };
            let trace = simulate_decode(
                weights,
                rope,
                &x,
                pair.format_k,
                pair.format_q,
                sorted.then_some(&plan),
            )
            .map_err(|e| Error::Cell {
                cell: cell(),
                source: Box::new(e),
            })?;
            let m = cache_metrics(&trace).map_err(|e| Error::Cell {
                cell: cell(),
                source: Box::new(e),
            })?;
            out.push(ErrorReport {
                format_q: pair.format_q,
                format_k: pair.format_k,
                block_size: pair.format_k.block_size(),
                sorted,
                order: cfg.order,
                seed,
                mse: m.mse,
                sqnr_db: m.sqnr_db,
                sqnr_defined: m.sqnr_defined,
                max_abs_err: m.max_abs_err,
                logits_max_abs_err: trace.logits_max_abs_err(),
                bits_per_element: m.bits_per_element,
            });
        }
    }
    Ok(out)
}

/// Runs every cell on a pool of `workers` threads.
///
/// Cells come back ordered by grid row, then seed, then unsorted before
/// sorted, whatever the thread count. The first failing cell in that order
/// is reported.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<ErrorReport>> {
    cfg.validate()?;
    let rope = cfg.rope_tables()?;
    let imported = match &cfg.weights {
        WeightSource::Import { wk, wq } => Some(load_imported(cfg, wk, wq)?),
        WeightSource::Synthetic { .. } => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let per_seed: Vec<Result<Vec<ErrorReport>>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, imported.as_ref(), rope.as_ref(), seed))
            .collect()
    });
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;
    let rows_per_seed = cfg.grid.len() * 2;
    let mut cells = Vec::with_capacity(rows_per_seed * cfg.seeds.len());
    for g in 0..cfg.grid.len() {
        for seed_rows in &per_seed {
            cells.extend_from_slice(&seed_rows[2 * g..2 * g + 2]);
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfp::BfpFormat;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            head_dim: 16,
            model_dim: 24,
            tokens: 6,
            weights: WeightSource::Synthetic {
                n_outlier_channels: 2,
                outlier_scale: 20.0,
                base_std: 0.05,
            },
            grid: vec![
                FormatPair::new(CacheFormat::Float, CacheFormat::Float),
                FormatPair::new(
                    CacheFormat::Bfp(BfpFormat::bfp16(16).unwrap()),
                    CacheFormat::Bfp(BfpFormat::bfp12(16).unwrap()),
                ),
                FormatPair::new(
                    CacheFormat::Bfp(BfpFormat::bfp16(4).unwrap()),
                    CacheFormat::Bfp(BfpFormat::bfp12(4).unwrap()),
                ),
            ],
            seeds: vec![3, 1, 2],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_from_empty_document() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.grid.len(), 4);
        assert_eq!(cfg.grid[3].format_k.to_string(), "BFP12_32");
        assert_eq!(cfg.grid[3].format_q.to_string(), "BFP16_32");
        cfg.validate().unwrap();
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = small();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(
            serde_json::from_str::<ExperimentConfig>(&json).unwrap(),
            cfg
        );
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"head_dims": 4}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(
            r#"{"grid": [{"format_q": "BFP13_0", "format_k": "FP-lossless"}]}"#
        )
        .is_err());
        let mut cfg = small();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = small();
        cfg.weights = WeightSource::Synthetic {
            n_outlier_channels: 17,
            outlier_scale: 2.0,
            base_std: 0.1,
        };
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.head_dim = 15;
        cfg.rope.enabled = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cells_are_complete_and_ordered() {
        let cfg = small();
        let cells = run_experiment(&cfg, 2).unwrap();
        assert_eq!(cells.len(), 3 * 3 * 2);
        let keys: Vec<_> = cells
            .iter()
            .map(|c| (c.format_k.block_size(), c.seed, c.sorted))
            .collect();
        assert_eq!(keys[0], (None, 3, false));
        assert_eq!(keys[1], (None, 3, true));
        assert_eq!(keys[2], (None, 1, false));
        assert_eq!(keys[6], (Some(16), 3, false));
        for c in &cells[..6] {
            assert_eq!(c.mse, 0.0);
            assert_eq!(c.logits_max_abs_err, 0.0);
            assert_eq!(c.sqnr_db, f64::INFINITY);
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut cfg = small();
        cfg.rope.enabled = true;
        assert_eq!(
            run_experiment(&cfg, 1).unwrap(),
            run_experiment(&cfg, 4).unwrap()
        );
    }

    #[test]
    fn block_equal_to_head_dim_is_unaffected_by_sorting() {
        let cells = run_experiment(&small(), 1).unwrap();
        for pair in cells[6..12].chunks(2) {
            assert_eq!(pair[0].mse.to_bits(), pair[1].mse.to_bits());
        }
    }

    #[test]
    fn imported_weights() {
        let dir = tempfile::tempdir().unwrap();
        let w = gen_outlier_head(
            16,
            24,
            &OutlierSpec {
                n_outlier_channels: 2,
                outlier_scale: 20.0,
                base_std: 0.05,
                seed: 3,
            },
        )
        .unwrap();
        tensorio::save(
            dir.path().join("wk.bfpt"),
            &tensorio::StoredTensor::F64(w.wk().to_tensor()),
        )
        .unwrap();
        tensorio::save(
            dir.path().join("wq.bfpt"),
            &tensorio::StoredTensor::F64(w.wq().to_tensor()),
        )
        .unwrap();
        let cfg_path = dir.path().join("cfg.json");
        std::fs::write(
            &cfg_path,
            r#"{"head_dim": 16, "model_dim": 24, "tokens": 6, "seeds": [3],
                "weights": {"source": "import", "wk": "wk.bfpt", "wq": "wq.bfpt"}}"#,
        )
        .unwrap();
        let imported = ExperimentConfig::from_file(&cfg_path).unwrap();
        let mut synthetic = small();
        synthetic.grid = imported.grid.clone();
        synthetic.seeds = vec![3];
        assert_eq!(
            run_experiment(&imported, 1).unwrap(),
            run_experiment(&synthetic, 1).unwrap()
        );

        let mut wrong = imported;
        wrong.model_dim = 25;
        assert!(matches!(
            run_experiment(&wrong, 1),
            Err(Error::InvalidConfig(_))
        ));
    }
}
