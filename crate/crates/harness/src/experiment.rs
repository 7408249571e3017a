//! The experiment commands. The CLI and the acceptance suite both call these.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use smug_core::checkpoint::ModelCheckpoint;
use smug_core::fourier::{ComplexImage, ForwardOperator, KSpaceData};
use smug_core::models::{DenoiserNet, IstaNetParams, WeightEncoder};
use smug_core::reconstructors::{Method, Models, Pipeline, UnrollConfig};
use smug_core::rng::derive_seed;
use smug_core::robustness::{
    empirical_bound_m, evaluate, operator_constants, pgd_attack, random_box_delta, robustness_errors_by_step, sweep,
    BoundReport, EvalSetup, MetricsRow, SweepKind,
};
use smug_core::training::{eval_loss, train, EpochRecord, Objective, TrainConfig, TrainItem, UstabVariant};

use crate::config::{ExperimentConfig, Split};
use crate::error::{io_err, HarnessError, Result};
use crate::io::{
    dataset_from_bytes, dataset_to_bytes, fmt_f64, metrics_table, CsvFile, OutputSet, RunManifest, Table,
    METRICS_COLUMNS,
};
use crate::phantom::{generate_phantoms, simulate_measurements};

pub const ENV_OUTPUT_ROOT: &str = "SMUG_OUTPUT_ROOT";

/// A validated config bound to an output directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            root: root.into(),
        })
    }

    /// Output directory: `explicit`, else the config's `output_dir`, else
    /// `$SMUG_OUTPUT_ROOT`, else `./runs`.
    pub fn resolve(cfg: ExperimentConfig, explicit: Option<PathBuf>) -> Result<Self> {
        let root = explicit
            .or_else(|| cfg.output_dir.clone())
            .or_else(|| std::env::var_os(ENV_OUTPUT_ROOT).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        Self::new(cfg, root)
    }

    fn output(&self, command: &str) -> Result<OutputSet> {
        OutputSet::new(&self.root, command, &self.hash, self.cfg.seed_table())
    }

    pub fn operator(&self) -> Result<ForwardOperator> {
        Ok(ForwardOperator::new(self.cfg.mask_spec().build()?))
    }

    pub fn data_path(&self, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{}.bin", split.name()))
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<ComplexImage>> {
        let path = self.data_path(split);
        if !path.exists() {
            return Err(HarnessError::Config(format!(
                "{} is missing; run gen-data first",
                path.display()
            )));
        }
        let (header, images) = dataset_from_bytes(&fs::read(&path).map_err(io_err(&path))?)?;
        let size = self.cfg.data.size;
        if header.count != self.cfg.split_len(split) || (header.height, header.width) != (size, size) {
            return Err(HarnessError::Config(format!(
                "{} holds {} images of {}x{}, the config asks for {} of {size}x{size}",
                path.display(),
                header.count,
                header.height,
                header.width,
                self.cfg.split_len(split)
            )));
        }
        Ok(images)
    }

    /// Targets paired with simulated measurements under the configured mask.
    pub fn train_items(&self, split: Split, op: &ForwardOperator) -> Result<Vec<TrainItem>> {
        let seed = self.cfg.measurement_seed(split);
        self.load_split(split)?
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let y = simulate_measurements(&t, op, self.cfg.data.measurement_noise, derive_seed(seed, &[i as u64]))?;
                Ok(TrainItem {
                    target: t,
                    measurements: y,
                })
            })
            .collect()
    }

    pub fn load_checkpoint(&self, name: &str) -> Result<ModelCheckpoint> {
        let path = self.checkpoint_path(name);
        if !path.exists() {
            return Err(HarnessError::Config(format!("missing checkpoint {}", path.display())));
        }
        Ok(ModelCheckpoint::load(&path)?)
    }

    pub fn load_models(&self, method: Method) -> Result<Models> {
        let ck = self.load_checkpoint(method.name()).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{m}; run finetune --mode {method}")),
            other => other,
        })?;
        Ok(Models {
            denoiser: ck.denoiser,
            encoder: ck.encoder,
            ista: ck.ista,
        })
    }

    fn checkpoint(&self, models: &Models, objective: &str, tc: &TrainConfig) -> Result<Vec<u8>> {
        let mut seeds = self.cfg.seed_table();
        seeds.insert(format!("{objective}_train"), tc.seed);
        let ck = ModelCheckpoint {
            denoiser: models.denoiser.clone(),
            encoder: models.encoder.clone(),
            ista: models.ista.clone(),
            train_config: serde_json::json!({
                "config_hash": self.hash,
                "objective": objective,
                "train": tc,
                "unroll": self.cfg.unroll,
            }),
            seeds,
            mask: Some(self.cfg.mask_spec()),
        };
        Ok(ck.to_bytes()?)
    }

    pub fn eval_setup(&self) -> Result<EvalSetup> {
        Ok(EvalSetup {
            targets: self.load_split(Split::Test)?,
            mask: self.cfg.mask_spec(),
            unroll: self.cfg.unroll.clone(),
            smoothing: self.cfg.eval_smoothing(),
            attack: self.cfg.attack_config(),
            noise_sigma: self.cfg.eval.noise_sigma,
            timing: self.cfg.eval.timing,
        })
    }

    fn trained(&self) -> Result<Vec<(Method, Models)>> {
        self.cfg
            .eval_methods()?
            .into_iter()
            .map(|m| Ok((m, self.load_models(m)?)))
            .collect()
    }
}

/// Writes the train, validation and test phantoms.
pub fn gen_data(ws: &Workspace) -> Result<RunManifest> {
    let mut out = ws.output("gen-data")?;
    for split in Split::ALL {
        let n = ws.cfg.split_len(split);
        let images = if n == 0 {
            Vec::new()
        } else {
            generate_phantoms(&ws.cfg.phantom_spec(split), n)?
        };
        out.write(
            &format!("data/{}.bin", split.name()),
            &dataset_to_bytes(&images, split.name(), &ws.hash)?,
        )?;
    }
    out.commit()
}

fn epoch_table(ws: &Workspace, hist: &[(EpochRecord, Option<f64>)]) -> Table {
    let mut t = Table::new(
        &[
            "epoch",
            "total",
            "recon",
            "ustab",
            "val_total",
            "steps",
            "clipped_steps",
            "wall_seconds",
        ],
        &ws.hash,
    );
    for (r, val) in hist {
        t.push(vec![
            r.epoch.to_string(),
            fmt_f64(r.loss.total),
            fmt_f64(r.loss.recon),
            fmt_f64(r.loss.ustab),
            val.map(fmt_f64).unwrap_or_default(),
            r.steps.to_string(),
            r.clipped_steps.to_string(),
            if ws.cfg.eval.timing {
                fmt_f64(r.wall_seconds)
            } else {
                String::new()
            },
        ]);
    }
    t
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    ws: &Workspace,
    objective: Objective,
    models: &mut Models,
    frozen: Option<&DenoiserNet>,
    op: &ForwardOperator,
    unroll: &UnrollConfig,
    tc: &TrainConfig,
) -> Result<Vec<(EpochRecord, Option<f64>)>> {
    let items = ws.train_items(Split::Train, op)?;
    let val = if ws.cfg.data.n_val > 0 {
        ws.train_items(Split::Val, op)?
    } else {
        Vec::new()
    };
    let mut val_losses = Vec::new();
    train(objective, models, frozen, &items, op, unroll, tc, |rec, m| {
        if val.is_empty() {
            val_losses.push(None);
            return Ok(());
        }
        let mut sum = 0.0;
        for (k, item) in val.iter().enumerate() {
            let sc = tc.smoothing(derive_seed(tc.seed, &[u64::MAX, rec.epoch as u64, k as u64]));
            sum += eval_loss(objective, m, frozen, op, item, unroll, &sc, tc)?.total;
        }
        val_losses.push(Some(sum / val.len() as f64));
        Ok(())
    })
    .map(|hist| hist.into_iter().zip(val_losses).collect())
    .map_err(Into::into)
}

/// Trains the denoiser alone and writes `checkpoints/pretrain.ckpt`.
pub fn run_pretrain(ws: &Workspace) -> Result<RunManifest> {
    let op = ws.operator()?;
    let tc = ws.cfg.pretrain_config();
    let mut models = Models {
        denoiser: Some(DenoiserNet::init(ws.cfg.denoiser.clone(), ws.cfg.denoiser_seed())?),
        ..Default::default()
    };
    let hist = run_training(ws, Objective::Pretrain, &mut models, None, &op, &ws.cfg.unroll, &tc)?;
    let mut out = ws.output("pretrain")?;
    out.write_table("pretrain_epochs.csv", &epoch_table(ws, &hist))?;
    out.write("checkpoints/pretrain.ckpt", &ws.checkpoint(&models, "pretrain", &tc)?)?;
    out.commit()
}

/// Fine-tunes `method` end to end from the pre-trained denoiser (or from a
/// fresh initialization for ISTA-Net) and writes `checkpoints/<method>.ckpt`.
pub fn run_finetune(ws: &Workspace, method: Method) -> Result<RunManifest> {
    let op = ws.operator()?;
    let tc = ws.cfg.finetune_config(method);
    let cfg = &ws.cfg;
    let pre = match method {
        Method::IstaNet(_) => None,
        _ => Some(
            ws.load_checkpoint("pretrain")
                .map_err(|e| HarnessError::Config(format!("{e}; run pretrain first")))?
                .denoiser
                .ok_or_else(|| HarnessError::Config("pretrain checkpoint holds no denoiser".into()))?,
        ),
    };
    let mut models = Models {
        denoiser: pre.clone(),
        encoder: if method.uses_encoder() {
            Some(WeightEncoder::init(cfg.encoder.clone(), cfg.encoder_seed())?)
        } else {
            None
        },
        ista: if matches!(method, Method::IstaNet(_)) {
            Some(IstaNetParams::init(cfg.ista.clone(), cfg.ista_seed())?)
        } else {
            None
        },
    };
    let frozen = (tc.ustab_variant == UstabVariant::FrozenDenoiser)
        .then_some(pre.as_ref())
        .flatten();
    let hist = run_training(
        ws,
        Objective::Finetune(method),
        &mut models,
        frozen,
        &op,
        &cfg.unroll,
        &tc,
    )?;
    let name = method.name();
    let mut out = ws.output(&format!("finetune_{name}"))?;
    out.write_table(&format!("finetune_{name}_epochs.csv"), &epoch_table(ws, &hist))?;
    out.write(&format!("checkpoints/{name}.ckpt"), &ws.checkpoint(&models, name, &tc)?)?;
    out.commit()
}

fn trace_table(ws: &Workspace, method: Method, models: &Models, setup: &EvalSetup) -> Result<Table> {
    let op = ForwardOperator::new(setup.mask.build()?);
    let pipe = Pipeline::new(method, models, &op, &setup.unroll, &setup.smoothing);
    let y = op.apply_forward(&setup.targets[0])?;
    let trace = pipe.run(&y)?;
    let mut t = Table::new(
        &[
            "method",
            "step",
            "iterate_norm",
            "step_change",
            "cg_iterations",
            "cg_rel_residual",
            "cg_converged",
        ],
        &ws.hash,
    );
    for r in trace.rows() {
        t.push(vec![
            method.name().into(),
            r.step.to_string(),
            fmt_f64(r.iterate_norm),
            fmt_f64(r.step_change),
            r.cg_iterations.map(|v| v.to_string()).unwrap_or_default(),
            r.cg_rel_residual.map(fmt_f64).unwrap_or_default(),
            r.cg_converged.map(|v| v.to_string()).unwrap_or_default(),
        ]);
    }
    Ok(t)
}

/// Clean, noisy and PGD metrics for every configured method, written to
/// `eval.csv`, plus a per-iterate trace of the first test image.
pub fn run_eval(ws: &Workspace) -> Result<(Vec<MetricsRow>, RunManifest)> {
    let setup = ws.eval_setup()?;
    let mut rows = Vec::new();
    let mut out = ws.output("eval")?;
    for (method, models) in ws.trained()? {
        rows.push(evaluate(method, &models, &setup, "eval", setup.attack.epsilon_scale, None)?.row);
        out.write_table(
            &format!("trace_{}.csv", method.name()),
            &trace_table(ws, method, &models, &setup)?,
        )?;
    }
    out.write_table("eval.csv", &metrics_table(&rows, &ws.hash))?;
    Ok((rows, out.commit()?))
}

/// Runs PGD against `method` on every test image and records the objective
/// history.
pub fn run_attack(ws: &Workspace, method: Method) -> Result<RunManifest> {
    let setup = ws.eval_setup()?;
    let models = ws.load_models(method)?;
    let op = ForwardOperator::new(setup.mask.build()?);
    let mut t = Table::new(
        &["method", "item", "step", "objective", "epsilon", "delta_l2"],
        &ws.hash,
    );
    for (i, target) in setup.targets.iter().enumerate() {
        let sc = smug_core::reconstructors::SmoothingConfig {
            seed: derive_seed(setup.smoothing.seed, &[i as u64]),
            ..setup.smoothing.clone()
        };
        let pipe = Pipeline::new(method, &models, &op, &setup.unroll, &sc);
        let y = op.apply_forward(target)?;
        let ac = smug_core::robustness::AttackConfig {
            seed: derive_seed(setup.attack.seed, &[i as u64]),
            ..setup.attack.clone()
        };
        let res = pgd_attack(&pipe, &y, target, &ac)?;
        for (s, obj) in res.history.iter().enumerate() {
            t.push(vec![
                method.name().into(),
                i.to_string(),
                s.to_string(),
                fmt_f64(*obj),
                fmt_f64(res.epsilon),
                fmt_f64(res.delta.norm()),
            ]);
        }
    }
    let mut out = ws.output(&format!("attack_{}", method.name()))?;
    out.write_table(&format!("attack_{}.csv", method.name()), &t)?;
    out.commit()
}

/// Sweeps one evaluation parameter over `grid` for every configured method.
pub fn run_sweep(ws: &Workspace, kind: SweepKind, grid: &[f64]) -> Result<(Vec<MetricsRow>, RunManifest)> {
    let setup = ws.eval_setup()?;
    let rows = sweep(kind, grid, &ws.trained()?, &setup)?;
    let mut out = ws.output(&format!("sweep_{kind}"))?;
    out.write_table(&format!("sweep_{kind}.csv"), &metrics_table(&rows, &ws.hash))?;
    Ok((rows, out.commit()?))
}

/// Per-depth audit of the certified bound, with architectural and
/// (non-certified) empirical `M`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct BoundCheck {
    pub lambda: f64,
    pub m_empirical: f64,
    pub reports: Vec<BoundReport>,
    pub empirical: Vec<BoundReport>,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.reports.iter().all(|r| r.holds)
    }
}

/// Audits the smoothed-unrolling checkpoint: random box perturbations plus
/// the PGD perturbation, at every depth `1..=N`. Uses `lambda = 1`.
pub fn run_bound_check(ws: &Workspace) -> Result<(BoundCheck, RunManifest)> {
    let setup = ws.eval_setup()?;
    let models = ws.load_models(Method::Smug)?;
    let den = models
        .denoiser
        .as_ref()
        .ok_or_else(|| HarnessError::Config("smug checkpoint holds no denoiser".into()))?;
    let op = ForwardOperator::new(setup.mask.build()?);
    let unroll = UnrollConfig {
        lambda: 1.0,
        ..setup.unroll.clone()
    };
    let sigma = setup.smoothing.sigma;
    let n_steps = unroll.n_steps;
    let seed = ws.cfg.bound_seed();
    let (opnorm, alpha) = operator_constants(&op, 1.0, seed)?;
    let (h, w) = op.shape();
    let m = den.bound_m(h, w);
    let m_emp = empirical_bound_m(den, h, w, 64, seed);
    let mut pairs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_steps + 1];
    let items = ws.cfg.eval.bound_items.clamp(1, setup.targets.len());
    for (i, target) in setup.targets.iter().take(items).enumerate() {
        let pipe = Pipeline::new(Method::Smug, &models, &op, &unroll, &setup.smoothing);
        let y = op.apply_forward(target)?;
        let ac = smug_core::robustness::AttackConfig {
            seed: derive_seed(setup.attack.seed, &[i as u64]),
            ..setup.attack.clone()
        };
        let eps = ac.radius(&y);
        let mut deltas: Vec<KSpaceData> = (0..ws.cfg.eval.bound_random_deltas)
            .map(|k| random_box_delta(op.mask(), eps, derive_seed(seed, &[i as u64, k as u64])))
            .collect::<std::result::Result<_, _>>()?;
        deltas.push(pgd_attack(&pipe, &y, target, &ac)?.delta);
        for d in &deltas {
            let errs = robustness_errors_by_step(&pipe, &y, d)?;
            let dn = d.norm();
            for (n, e) in errs.iter().enumerate() {
                pairs[n].push((*e, dn));
            }
        }
    }
    let mut reports = Vec::new();
    let mut empirical = Vec::new();
    for (n, p) in pairs.iter().enumerate().skip(1) {
        reports.push(BoundReport::audit(n as u64, sigma, m, alpha, opnorm, p)?);
        empirical.push(BoundReport::audit(n as u64, sigma, m_emp, alpha, opnorm, p)?);
    }
    let mut t = Table::new(
        &[
            "n",
            "sigma",
            "M",
            "alpha",
            "opnorm",
            "r",
            "c_n",
            "max_ratio",
            "pairs",
            "holds",
            "M_empirical",
            "c_n_empirical",
            "holds_empirical",
        ],
        &ws.hash,
    );
    for (r, e) in reports.iter().zip(&empirical) {
        let max_ratio = r
            .errors
            .iter()
            .zip(&r.delta_norms)
            .map(|(e, d)| if *d > 0.0 { e / d } else { 0.0 })
            .fold(0.0, f64::max);
        t.push(vec![
            r.n.to_string(),
            fmt_f64(r.sigma),
            fmt_f64(r.m),
            fmt_f64(r.alpha),
            fmt_f64(r.opnorm),
            fmt_f64(r.r),
            fmt_f64(r.c_n),
            fmt_f64(max_ratio),
            r.errors.len().to_string(),
            r.holds.to_string(),
            fmt_f64(e.m),
            fmt_f64(e.c_n),
            e.holds.to_string(),
        ]);
    }
    let check = BoundCheck {
        lambda: 1.0,
        m_empirical: m_emp,
        reports,
        empirical,
    };
    let mut out = ws.output("bound-check")?;
    out.write_table("bound_check.csv", &t)?;
    out.write_json(
        "bound_check.json",
        &serde_json::json!({ "config_hash": ws.hash, "check": check }),
    )?;
    Ok((check, out.commit()?))
}

const ID_COLUMNS: [&str; 7] = ["method", "kind", "grid_value", "epoch", "n", "item", "step"];

fn collect_csvs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if !dir.is_dir() {
        return Ok(found);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                if path.file_name().is_some_and(|n| n != "report") {
                    stack.push(path);
                }
            } else if path.extension().is_some_and(|e| e == "csv") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Aggregates every CSV under `dir` into `report/summary.csv` (metric rows
/// side by side) and `report/long.csv` (one value per line). Refuses inputs
/// from different configs unless `allow_mixed`.
pub fn run_report(dir: &Path, allow_mixed: bool) -> Result<RunManifest> {
    let paths = collect_csvs(dir)?;
    if paths.is_empty() {
        return Err(HarnessError::NoInputs(format!("no CSV files under {}", dir.display())));
    }
    let files = paths.iter().map(|p| CsvFile::read(p)).collect::<Result<Vec<_>>>()?;
    let mut hashes: Vec<String> = files.iter().flat_map(|f| f.hashes()).collect();
    hashes.sort();
    hashes.dedup();
    if hashes.len() > 1 && !allow_mixed {
        return Err(HarnessError::MixedHashes(format!(
            "{} distinct config hashes under {}; pass --allow-mixed to combine them",
            hashes.len(),
            dir.display()
        )));
    }
    let report_hash = match hashes.as_slice() {
        [one] => one.clone(),
        [] => String::new(),
        _ => "mixed".into(),
    };
    let source = |f: &CsvFile| {
        f.path
            .strip_prefix(dir)
            .unwrap_or(&f.path)
            .with_extension("")
            .to_string_lossy()
            .replace('\\', "/")
    };
    let mut summary_cols = vec!["source"];
    summary_cols.extend(METRICS_COLUMNS);
    let mut summary = Table::new(&summary_cols, "");
    let mut long_cols = vec!["source"];
    long_cols.extend(ID_COLUMNS);
    long_cols.extend(["metric", "value"]);
    let mut long = Table::new(&long_cols, "");
    let mut rows_long: Vec<Vec<String>> = Vec::new();
    let mut rows_summary: Vec<Vec<String>> = Vec::new();
    for f in &files {
        let src = source(f);
        let hash_col = f.column("config_hash");
        let is_metrics = METRICS_COLUMNS.iter().all(|c| f.column(c).is_some());
        let ids: Vec<Option<usize>> = ID_COLUMNS.iter().map(|c| f.column(c)).collect();
        for r in &f.rows {
            let hash = hash_col.map(|c| r[c].clone()).unwrap_or_default();
            if is_metrics {
                let mut row = vec![src.clone()];
                row.extend(METRICS_COLUMNS.iter().map(|c| r[f.column(c).expect("checked")].clone()));
                row.push(hash.clone());
                rows_summary.push(row);
            }
            for (c, name) in f.header.iter().enumerate() {
                if ID_COLUMNS.contains(&name.as_str()) || Some(c) == hash_col || r[c].parse::<f64>().is_err() {
                    continue;
                }
                let mut row = vec![src.clone()];
                row.extend(ids.iter().map(|i| i.map(|i| r[i].clone()).unwrap_or_default()));
                row.extend([name.clone(), r[c].clone(), hash.clone()]);
                rows_long.push(row);
            }
        }
    }
    let mut out = OutputSet::new(dir, "report", &report_hash, BTreeMap::new())?;
    for mut r in rows_summary {
        let h = r.pop().expect("hash");
        summary.push_with_hash(r, h);
    }
    for mut r in rows_long {
        let h = r.pop().expect("hash");
        long.push_with_hash(r, h);
    }
    out.write_table("report/summary.csv", &summary)?;
    out.write_table("report/long.csv", &long)?;
    out.commit()
}
