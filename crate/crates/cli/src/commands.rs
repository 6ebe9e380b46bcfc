//! Subcommand implementations. Each returns a JSON report body and whether
//! every property asserted by the command holds.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use coda::augment::{
    augment_to_target, DistanceHeuristic, GroundTruth, Identity, MaskProvider, PositionLayout,
};
use coda::dataset::Dataset;
use coda::envs::{collect_random, RewardFn};
use coda::par::Parallelism;
use coda::sandy::dynamics::{random_actions, rollout_divergence};
use coda::sandy::train::write_curve_csv;
use coda::sandy::{
    coda_dynamics_experiment, roc_eval, roc_from_scores, train_sandy, DynExperimentConfig, Learned,
    SandyModel,
};
use coda::scm::run_campaign;
use coda::{FactoredSpace, Transition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{BuiltEnv, RunConfig};
use crate::error::{CliError, CliResult};

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub par: Parallelism,
}

pub struct Report {
    pub ok: bool,
    pub body: Value,
}

impl Report {
    fn ok(body: Value) -> Self {
        Report { ok: true, body }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    GroundTruth,
    Identity,
    Heuristic,
    Learned,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn env(&self) -> CliResult<BuiltEnv> {
        self.cfg.env.build()
    }

    fn reward(&self) -> Option<&dyn RewardFn> {
        self.cfg.task.as_ref().map(|t| t as &dyn RewardFn)
    }
}

fn artifact<T>(path: &Path, r: coda::Result<T>) -> CliResult<T> {
    r.map_err(|source| CliError::Artifact {
        path: path.display().to_string(),
        source,
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn load_dataset(path: &Path, space: &FactoredSpace) -> CliResult<Dataset> {
    let ds = artifact(path, Dataset::load(path))?;
    if *ds.space != *space {
        return Err(CliError::Artifact {
            path: path.display().to_string(),
            source: coda::Error::SpaceMismatch,
        });
    }
    Ok(ds)
}

fn load_model(path: &Path, space: &FactoredSpace) -> CliResult<SandyModel> {
    let file = File::open(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let model = artifact(path, SandyModel::load(&mut BufReader::new(file)))?;
    if **model.space() != *space {
        return Err(CliError::Artifact {
            path: path.display().to_string(),
            source: coda::Error::SpaceMismatch,
        });
    }
    Ok(model)
}

fn save_dataset(path: &Path, space: &Arc<FactoredSpace>, ts: Vec<Transition>) -> CliResult<()> {
    artifact(path, Dataset::new(space.clone(), ts).and_then(|d| d.save(path)))
}

fn provenance_counts(ts: &[Transition]) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for t in ts {
        *counts.entry(t.provenance.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Splits off the trailing `fraction` of `ts`.
fn split_tail(mut ts: Vec<Transition>, fraction: f64) -> (Vec<Transition>, Vec<Transition>) {
    let n_tail = (ts.len() as f64 * fraction).round() as usize;
    let tail = ts.split_off(ts.len() - n_tail.min(ts.len()));
    (ts, tail)
}

pub fn gen(ctx: &Context) -> CliResult<Report> {
    let built = ctx.env()?;
    let space = built.env.space().clone();
    let g = &ctx.cfg.gen;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed());
    let ts = collect_random(built.env.as_ref(), g.n, g.reset_prob, ctx.reward(), &mut rng)?;
    let mut files = BTreeMap::new();
    if g.val_fraction > 0.0 {
        let (train, val) = split_tail(ts, g.val_fraction);
        files.insert("train", (ctx.path("train.coda"), train.len()));
        files.insert("val", (ctx.path("val.coda"), val.len()));
        save_dataset(&files["train"].0, &space, train)?;
        save_dataset(&files["val"].0, &space, val)?;
    } else {
        files.insert("data", (ctx.path("data.coda"), ts.len()));
        save_dataset(&files["data"].0, &space, ts)?;
    }
    let files: BTreeMap<_, _> = files
        .into_iter()
        .map(|(k, (p, n))| (k, json!({"path": p, "records": n})))
        .collect();
    Ok(Report::ok(json!({ "seed": ctx.cfg.seed(), "files": files })))
}

pub fn augment(
    ctx: &Context,
    data: &Path,
    kind: ProviderKind,
    checkpoint: Option<&Path>,
    tau: Option<f64>,
) -> CliResult<Report> {
    let built = ctx.env()?;
    let space = built.env.space().clone();
    let ds = load_dataset(data, &space)?;
    let provider: Box<dyn MaskProvider> = match kind {
        ProviderKind::GroundTruth => Box::new(GroundTruth::new(built.dynamics.clone())),
        ProviderKind::Identity => Box::new(Identity::new(space.clone())),
        ProviderKind::Heuristic => Box::new(DistanceHeuristic::new(
            space.clone(),
            PositionLayout::leading(&space, 0),
            ctx.cfg.coda.heuristic_threshold,
        )?),
        ProviderKind::Learned => {
            let path = checkpoint.ok_or(CliError::Missing("--checkpoint"))?;
            let model = load_model(path, &space)?;
            let tau = tau.unwrap_or(ctx.cfg.sandy.train.tau_default);
            Box::new(Learned::new(Arc::new(model), tau))
        }
    };
    let c = &ctx.cfg.coda;
    let coda_cfg = coda::augment::CodaConfig {
        seed: ctx.cfg.seed(),
        ..c.config.clone()
    };
    let reward = if coda_cfg.relabel_reward { ctx.reward() } else { None };
    let batch = augment_to_target(
        &ds.transitions,
        provider.as_ref(),
        reward,
        &coda_cfg,
        c.target,
        c.max_rounds,
        ctx.par,
    )?;
    let mut all = ds.transitions;
    let n_real = all.len();
    all.extend(batch.samples);
    let counts = provenance_counts(&all);
    let path = ctx.path("augmented.coda");
    let total = all.len();
    save_dataset(&path, &space, all)?;
    log::info!(
        "augmented {n_real} real transitions with {} counterfactuals",
        batch.stats.unique
    );
    Ok(Report::ok(json!({
        "provider": kind,
        "acceptance_rate": batch.stats.acceptance_rate(),
        "unique": batch.stats.unique,
        "target": c.target,
        "stats": batch.stats,
        "provenance": counts,
        "out": {"path": path, "records": total},
    })))
}

pub fn train_mask(ctx: &Context, data: &Path, val: Option<&Path>, test: Option<&Path>) -> CliResult<Report> {
    let built = ctx.env()?;
    let space = built.env.space().clone();
    let ds = load_dataset(data, &space)?;
    let (train, val) = match val {
        Some(p) => (ds.transitions, load_dataset(p, &space)?.transitions),
        None => split_tail(ds.transitions, ctx.cfg.sandy.val_fraction),
    };
    let s = &ctx.cfg.sandy;
    let train_cfg = coda::sandy::SandyTrainConfig {
        seed: ctx.cfg.seed(),
        ..s.train.clone()
    };
    let trained = train_sandy(s.model.clone(), space.clone(), &train, &val, &train_cfg, ctx.par)?;
    let ckpt = ctx.path("model.ckpt");
    let mut w = create(&ckpt)?;
    artifact(&ckpt, trained.model.save(&mut w))?;
    w.flush().map_err(|source| CliError::Io {
        path: ckpt.display().to_string(),
        source,
    })?;
    let curve = ctx.path("curve.csv");
    write_with(&curve, |w| write_curve_csv(w, &trained.curve))?;
    let mut body = json!({
        "model": s.model,
        "train_size": train.len(),
        "val_size": val.len(),
        "epochs": trained.curve.len(),
        "best_epoch": trained.best_epoch,
        "best_val_mse": trained.best_val_mse,
        "checkpoint": ckpt,
        "curve": curve,
    });
    let mut ok = true;
    if let Some(p) = test {
        let test = load_dataset(p, &space)?;
        let roc = roc_eval(&trained.model, built.dynamics.as_ref(), &test.transitions, None, ctx.par)?;
        let pass = s.min_auc.is_none_or(|m| roc.auc >= m);
        ok &= pass;
        body["auc"] = json!(roc.auc);
        body["min_auc"] = json!(s.min_auc);
        body["auc_ok"] = json!(pass);
    }
    Ok(Report { ok, body })
}

pub fn eval_mask(ctx: &Context, checkpoint: Option<&Path>, data: &Path, oracle: bool) -> CliResult<Report> {
    let built = ctx.env()?;
    let space = built.env.space().clone();
    let test = load_dataset(data, &space)?;
    if test.is_empty() {
        return Err(coda::Error::Empty("evaluation set").into());
    }
    let roc = if oracle {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for t in &test.transitions {
            let (_, m) = built.dynamics.step(t.s.values(), t.a.values())?;
            scores.extend(m.entries().iter().map(|&e| e as u8 as f64));
            labels.extend_from_slice(m.entries());
        }
        roc_from_scores(&scores, &labels, None)?
    } else {
        let path = checkpoint.ok_or(CliError::Missing("--checkpoint or --oracle"))?;
        let model = load_model(path, &space)?;
        roc_eval(&model, built.dynamics.as_ref(), &test.transitions, None, ctx.par)?
    };
    let csv = ctx.path("roc.csv");
    write_with(&csv, |w| roc.write_csv(w))?;
    let min_auc = ctx.cfg.sandy.min_auc;
    let ok = min_auc.is_none_or(|m| roc.auc >= m);
    Ok(Report {
        ok,
        body: json!({
            "scores": if oracle { "ground-truth" } else { "model" },
            "auc": roc.auc,
            "min_auc": min_auc,
            "positives": roc.positives,
            "negatives": roc.negatives,
            "roc": csv,
        }),
    })
}

/// Relative excess of the final over the minimum validation error that
/// counts as overfitting.
pub const OVERFIT_MIN: f64 = 0.10;

pub fn train_dyn(ctx: &Context) -> CliResult<Report> {
    let mut runs = Vec::new();
    let mut ok = true;
    for &seed in &ctx.cfg.seeds {
        let cfg = DynExperimentConfig {
            seed,
            ..ctx.cfg.dynamics.clone()
        };
        let r = coda_dynamics_experiment(&cfg, ctx.par)?;
        let mut curves = BTreeMap::new();
        for arm in [&r.baseline, &r.identity_coda, &r.ground_truth_coda] {
            let path = ctx.path(&format!("dyn_seed{seed}_{}.csv", arm.name));
            write_with(&path, |w| write_curve_csv(w, &arm.curve))?;
            curves.insert(arm.name.clone(), path);
        }
        let overfit = r.baseline.overfit_ratio();
        let pass = r.ordering_holds() && overfit >= OVERFIT_MIN;
        ok &= pass;
        runs.push(json!({
            "seed": seed,
            "final_val_mse": {
                "baseline": r.baseline.final_val_mse,
                "identity-coda": r.identity_coda.final_val_mse,
                "ground-truth-coda": r.ground_truth_coda.final_val_mse,
            },
            "baseline_overfit": overfit,
            "ordering_holds": r.ordering_holds(),
            "coda_shortfall": r.coda_shortfall,
            "pass": pass,
            "curves": curves,
        }));
    }
    Ok(Report {
        ok,
        body: json!({ "runs": runs }),
    })
}

pub fn verify_scm(ctx: &Context) -> CliResult<Report> {
    let cfg = coda::scm::CampaignConfig {
        seed: ctx.cfg.seed(),
        ..ctx.cfg.scm.clone()
    };
    let r = run_campaign(&cfg, ctx.par)?;
    let n = r.instances;
    Ok(Report {
        ok: r.all_hold(),
        body: json!({
            "prop1": format!("{}/{n}", r.prop1_holds),
            "lemma1": format!("{}/{n}", r.lemma1_holds),
            "corollary": format!("{}/{n}", r.corollary_holds),
            "independent_union": r.independent_union,
            "locally_only": r.locally_only,
            "failures": r.failures,
        }),
    })
}

pub fn rollout(ctx: &Context, checkpoint: &Path) -> CliResult<Report> {
    let built = ctx.env()?;
    let space = built.env.space().clone();
    let model = load_model(checkpoint, &space)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed());
    let s0 = built.env.reset(&mut rng);
    let actions = random_actions(built.env.as_ref(), ctx.cfg.rollout.horizon, &mut rng);
    let (errors, coupled) = rollout_divergence(&model, built.dynamics.as_ref(), &s0, &actions)?;
    let csv = ctx.path("rollout.csv");
    write_with(&csv, |w| {
        writeln!(w, "step,error")?;
        for (t, e) in errors.iter().enumerate() {
            writeln!(w, "{},{}", t + 1, e)?;
        }
        Ok(())
    })?;
    let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    Ok(Report::ok(json!({
        "horizon": errors.len(),
        "mean_error": mean,
        "final_error": errors.last(),
        "coupled_steps": coupled,
        "rollout": csv,
    })))
}
