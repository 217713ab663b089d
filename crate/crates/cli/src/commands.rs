use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fsrl::analysis::{
    ablation_study, composition_report, default_sweep_points, derive_category_masks, static_topk_baseline,
    sweep, usage_report, FeatureCategoryMask, SweepInputs, TopKPoint,
};
use fsrl::harness::{
    load_adapter, load_lm, load_sae, save_adapter, save_lm, save_sae, write_csv, RunConfig,
};
use fsrl::lm::{pretrain_lm, FrozenLm};
use fsrl::oracles::run_grad_oracles;
use fsrl::pref::{
    encode_corpus, evaluate, gen_corpus, gen_preference_data, prepare, read_corpus, read_jsonl, split_validation,
    train_adapter, train_full_baseline, write_corpus, write_jsonl, PreferenceTriplet,
};
use fsrl::sae::{train_sae, SparseAutoencoder};
use fsrl::steering::SteeringAdapter;
use fsrl::theory::run_suite;
use fsrl::{Error, Result};
use serde::Serialize;
use serde_json::Value;

use crate::Command;

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn file(&self, dir: &str, name: &str) -> PathBuf {
        self.root.join(dir).join(name)
    }

    fn preferences(&self) -> PathBuf {
        self.file("data", "preferences.jsonl")
    }

    fn corpus(&self) -> PathBuf {
        self.file("data", "corpus.txt")
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.file("checkpoints", &format!("{name}.ckpt"))
    }

    fn metrics(&self, name: &str) -> PathBuf {
        self.file("metrics", &format!("{name}.csv"))
    }

    fn report(&self, name: &str) -> PathBuf {
        self.file("reports", name)
    }
}

/// Inputs shared by the commands that work on a trained adapter.
struct Trained {
    model: FrozenLm<f64>,
    sae: SparseAutoencoder<f64>,
    adapter: SteeringAdapter<f64>,
    data: Vec<PreferenceTriplet>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    snapshot: Value,
    out: Layout,
}

impl Ctx<'_> {
    fn data(&self) -> Result<Vec<PreferenceTriplet>> {
        read_jsonl(&self.out.preferences())
    }

    fn corpus(&self) -> Result<Vec<Vec<usize>>> {
        encode_corpus(&read_corpus(&self.out.corpus())?)
    }

    fn split<'d>(&self, data: &'d [PreferenceTriplet]) -> Result<(&'d [PreferenceTriplet], &'d [PreferenceTriplet])> {
        split_validation(data, self.cfg.simpo.validation_fraction)
    }

    fn lm(&self) -> Result<FrozenLm<f64>> {
        load_lm(&self.out.checkpoint("lm"))
    }

    /// The model with its hook moved to the layer the SAE was trained on.
    fn lm_and_sae(&self) -> Result<(FrozenLm<f64>, SparseAutoencoder<f64>)> {
        let (sae, layer) = load_sae(&self.out.checkpoint("sae"))?;
        Ok((self.lm()?.with_hook_layer(layer)?, sae))
    }

    fn trained(&self) -> Result<Trained> {
        let (model, sae) = self.lm_and_sae()?;
        let adapter = load_adapter(&self.out.checkpoint("adapter"))?;
        adapter.check_compatible(&sae)?;
        Ok(Trained {
            model,
            sae,
            adapter,
            data: self.data()?,
        })
    }

    fn masks(&self, t: &Trained) -> Result<Vec<FeatureCategoryMask>> {
        let (train, _) = self.split(&t.data)?;
        let masks = derive_category_masks(&t.model, &t.sae, train, self.cfg.analysis.mask_ratio)?;
        let mut body = format!("# config: {}\n", serde_json::to_string(&self.snapshot)?);
        for m in &masks {
            body.push_str(&m.to_line());
            body.push('\n');
        }
        write_file(&self.out.report("masks.txt"), body.as_bytes())?;
        Ok(masks)
    }

    fn csv<R: Serialize>(&self, path: &Path, rows: &[R]) -> Result<()> {
        write_csv(path, &self.snapshot, rows)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    /// Records the configuration next to an artifact that has no room for it.
    fn sidecar(&self, path: &Path) -> Result<()> {
        let mut p = path.as_os_str().to_owned();
        p.push(".config.json");
        write_file(Path::new(&p), serde_json::to_string_pretty(&self.snapshot)?.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct LmStep {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct SaeStep {
    step: usize,
    mse: f64,
    l0: f64,
}

#[derive(Serialize)]
struct EvalRow {
    model: &'static str,
    loss: f64,
    mean_l0: f64,
    mean_l1: f64,
    tokens: usize,
}

#[derive(Serialize)]
struct AblationRow {
    ablated: String,
    features_ablated: usize,
    loss: f64,
    full_loss: f64,
    unsteered_loss: f64,
    loss_per_feature: Option<f64>,
}

#[derive(Serialize)]
struct InteractionRow {
    first: String,
    second: String,
    interaction: f64,
}

#[derive(Serialize)]
struct UsageRow {
    context: &'static str,
    subset: String,
    rank: usize,
    feature: usize,
    frequency: f64,
}

#[derive(Serialize)]
struct UsageFitRow {
    context: &'static str,
    subset: String,
    tokens: Option<usize>,
    used_features: Option<usize>,
    slope: Option<f64>,
    intercept: Option<f64>,
    r2: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct TheoryRow {
    trial: usize,
    k: usize,
    numerical_rank: usize,
    bound: usize,
    holds: bool,
}

#[derive(Serialize)]
struct TheorySummary {
    trials: usize,
    d: usize,
    d_sae: usize,
    affine_holds: usize,
    max_affine_residual: f64,
    rank_holds: usize,
    product_rank_holds: usize,
    induced_holds: usize,
    max_induced_residual: f64,
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    let ctx = Ctx {
        cfg,
        snapshot: cfg.snapshot(),
        out: Layout {
            root: cfg.out_dir.clone(),
        },
    };
    match command {
        Command::GenData => gen_data(&ctx),
        Command::TrainLm => train_lm(&ctx),
        Command::TrainSae => train_sae_cmd(&ctx),
        Command::TrainAdapter => train_adapter_cmd(&ctx),
        Command::TrainBaseline => train_baseline(&ctx),
        Command::EvalLoss => eval_loss(&ctx),
        Command::Ablate => ablate(&ctx),
        Command::TopkBaseline => topk(&ctx),
        Command::AnalyzeUsage => usage(&ctx),
        Command::Composition => composition(&ctx),
        Command::Sweep => sweep_cmd(&ctx),
        Command::VerifyTheory => verify_theory(&ctx),
        Command::GradCheck => grad_check(&ctx),
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let data = gen_preference_data(cfg.seed, &cfg.data)?;
    let corpus = gen_corpus(cfg.seed, cfg.data.corpus_docs);
    fs::create_dir_all(ctx.out.root.join("data"))?;
    write_jsonl(&ctx.out.preferences(), &data)?;
    write_corpus(&ctx.out.corpus(), &corpus)?;
    ctx.sidecar(&ctx.out.preferences())?;
    ctx.sidecar(&ctx.out.corpus())?;
    println!("{} triplets, {} corpus documents", data.len(), corpus.len());
    Ok(())
}

fn train_lm(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let corpus = ctx.corpus()?;
    let (model, rep) = pretrain_lm::<f64>(&corpus, &cfg.lm, &cfg.lm_train, cfg.seed)?;
    save_lm(&ctx.out.checkpoint("lm"), &model, ctx.snapshot.clone())?;
    let rows: Vec<LmStep> = rep
        .step_losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LmStep { step, loss })
        .collect();
    ctx.csv(&ctx.out.metrics("lm_train"), &rows)?;
    println!(
        "held-out loss {:.4} -> {:.4}",
        rep.initial_heldout_loss, rep.final_heldout_loss
    );
    Ok(())
}

fn train_sae_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let model = ctx.lm()?;
    let corpus = ctx.corpus()?;
    let (sae, rep) = train_sae(&model, &corpus, &cfg.sae, cfg.seed)?;
    save_sae(
        &ctx.out.checkpoint("sae"),
        &sae,
        model.config().hook_layer,
        ctx.snapshot.clone(),
    )?;
    let rows: Vec<SaeStep> = rep
        .step_mse
        .iter()
        .zip(&rep.step_l0)
        .enumerate()
        .map(|(step, (&mse, &l0))| SaeStep { step, mse, l0 })
        .collect();
    ctx.csv(&ctx.out.metrics("sae_train"), &rows)?;
    println!(
        "held-out mse {:.4} -> {:.4}, mean l0 {:.2}",
        rep.initial_heldout_mse, rep.final_heldout_mse, rep.heldout_mean_l0
    );
    Ok(())
}

fn train_adapter_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let (model, sae) = ctx.lm_and_sae()?;
    let data = ctx.data()?;
    let (train, val) = ctx.split(&data)?;
    let adapter = SteeringAdapter::init(sae.d(), sae.d_sae(), cfg.simpo.variant, cfg.seed)?;
    let fit = train_adapter(&model, &sae, adapter, train, val, &cfg.simpo, cfg.seed)?;
    save_adapter(&ctx.out.checkpoint("adapter"), &fit.adapter, ctx.snapshot.clone())?;
    ctx.csv(&ctx.out.metrics("adapter_train"), &fit.log)?;
    println!(
        "validation loss {:.4} unsteered, {:.4} steered, mean l0 {:.2}",
        fit.unsteered.loss, fit.steered.loss, fit.steered.mean_l0
    );
    Ok(())
}

fn train_baseline(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let model = ctx.lm()?;
    let data = ctx.data()?;
    let (train, val) = ctx.split(&data)?;
    let fit = train_full_baseline(&model, train, val, &cfg.simpo, &cfg.baseline, cfg.seed)?;
    save_lm(&ctx.out.checkpoint("baseline"), &fit.model, ctx.snapshot.clone())?;
    ctx.csv(&ctx.out.metrics("baseline_train"), &fit.log)?;
    println!(
        "validation loss {:.4} -> {:.4}",
        fit.initial.loss, fit.final_eval.loss
    );
    Ok(())
}

fn eval_loss(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let t = ctx.trained()?;
    let (_, val) = ctx.split(&t.data)?;
    let val_p = prepare(&t.model, val)?;
    let row = |model, e: fsrl::pref::Evaluation| EvalRow {
        model,
        loss: e.loss,
        mean_l0: e.mean_l0,
        mean_l1: e.mean_l1,
        tokens: e.tokens,
    };
    let mut rows = vec![
        row("unsteered", evaluate(&t.model, None, &val_p, &cfg.simpo, None)?),
        row(
            "steered",
            evaluate(&t.model, Some((&t.sae, &t.adapter)), &val_p, &cfg.simpo, None)?,
        ),
    ];
    match load_lm::<f64>(&ctx.out.checkpoint("baseline")) {
        Ok(b) => {
            let b = b.with_hook_layer(t.model.config().hook_layer)?;
            rows.push(row("baseline", evaluate(&b, None, &prepare(&b, val)?, &cfg.simpo, None)?));
        }
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
            println!("no baseline checkpoint; skipping it");
        }
        Err(e) => return Err(e),
    }
    for r in &rows {
        println!("{:<10} loss {:.6} mean l0 {:.3}", r.model, r.loss, r.mean_l0);
    }
    ctx.csv(&ctx.out.report("eval_loss.csv"), &rows)
}

fn ablate(ctx: &Ctx) -> Result<()> {
    let t = ctx.trained()?;
    let masks = ctx.masks(&t)?;
    let (_, val) = ctx.split(&t.data)?;
    let val_p = prepare(&t.model, val)?;
    let study = ablation_study(&t.model, &t.sae, &t.adapter, &val_p, &masks, &ctx.cfg.simpo)?;
    let rows: Vec<AblationRow> = study
        .rows
        .iter()
        .map(|r| AblationRow {
            ablated: r.ablated.clone(),
            features_ablated: r.features_ablated,
            loss: r.loss,
            full_loss: r.full_loss,
            unsteered_loss: study.unsteered_loss,
            loss_per_feature: r.loss_per_feature,
        })
        .collect();
    for r in &rows {
        println!(
            "ablate {:<14} {:>4} features  loss {:.6}",
            r.ablated, r.features_ablated, r.loss
        );
    }
    ctx.csv(&ctx.out.report("ablation.csv"), &rows)?;
    if let Some(i) = study.interaction {
        let row = InteractionRow {
            first: masks[0].name.clone(),
            second: masks[1].name.clone(),
            interaction: i,
        };
        ctx.csv(&ctx.out.report("ablation_interaction.csv"), &[row])?;
    }
    Ok(())
}

fn topk(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let t = ctx.trained()?;
    let (_, val) = ctx.split(&t.data)?;
    let val_p = prepare(&t.model, val)?;
    let curve = static_topk_baseline(
        &t.model,
        &t.sae,
        &t.adapter,
        &val_p,
        &cfg.analysis.topk_pcts,
        &cfg.simpo,
    )?;
    let mut rows = curve.points.clone();
    rows.push(curve.dynamic.clone());
    rows.push(TopKPoint {
        label: "unsteered".into(),
        k_pct: None,
        k: None,
        mean_l0: 0.0,
        mean_l0_frac: 0.0,
        loss: curve.unsteered_loss,
    });
    for r in &rows {
        println!("{:<10} mean l0 {:>8.3}  loss {:.6}", r.label, r.mean_l0, r.loss);
    }
    ctx.csv(&ctx.out.report("topk.csv"), &rows)
}

fn usage(ctx: &Ctx) -> Result<()> {
    let t = ctx.trained()?;
    let masks = ctx.masks(&t)?;
    let (_, val) = ctx.split(&t.data)?;
    let reports = usage_report(&t.model, &t.sae, &t.adapter, val, &masks)?;
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for r in &reports {
        let context = r.context.as_str();
        match &r.result {
            Ok(u) => {
                rows.extend(u.ranked.iter().enumerate().map(|(rank, &(feature, frequency))| UsageRow {
                    context,
                    subset: r.subset.clone(),
                    rank,
                    feature,
                    frequency,
                }));
                let used = u.ranked.iter().filter(|x| x.1 > 0.0).count();
                println!(
                    "{context:<15} {:<8} used {used:>4}  slope {:.5}  r2 {:.4}",
                    r.subset, u.fit.slope, u.fit.r2
                );
                fits.push(UsageFitRow {
                    context,
                    subset: r.subset.clone(),
                    tokens: Some(u.tokens),
                    used_features: Some(used),
                    slope: Some(u.fit.slope),
                    intercept: Some(u.fit.intercept),
                    r2: Some(u.fit.r2),
                    error: None,
                });
            }
            Err(e) => {
                println!("{context:<15} {:<8} {e}", r.subset);
                fits.push(UsageFitRow {
                    context,
                    subset: r.subset.clone(),
                    tokens: None,
                    used_features: None,
                    slope: None,
                    intercept: None,
                    r2: None,
                    error: Some(e.clone()),
                });
            }
        }
    }
    ctx.csv(&ctx.out.report("usage.csv"), &rows)?;
    ctx.csv(&ctx.out.report("usage_fit.csv"), &fits)
}

fn composition(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let t = ctx.trained()?;
    let masks = ctx.masks(&t)?;
    let (_, val) = ctx.split(&t.data)?;
    let reports = composition_report(
        &t.model,
        &t.sae,
        &t.adapter,
        val,
        &masks,
        cfg.analysis.bootstrap_resamples,
        cfg.seed,
    )?;
    for r in &reports {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.2}"));
        println!(
            "{:<15} {:<8} sae {:6.2}%  steered {:>6}%  change {:>7}%",
            r.context.as_str(),
            r.mask,
            r.sae_baseline_pct,
            fmt(r.steered_pct),
            fmt(r.relative_change_pct)
        );
    }
    ctx.csv(&ctx.out.report("composition.csv"), &reports)
}

fn sweep_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let (model, sae) = ctx.lm_and_sae()?;
    let corpus = ctx.corpus()?;
    let data = ctx.data()?;
    let (train, val) = ctx.split(&data)?;
    let inputs = SweepInputs {
        model: &model,
        sae: &sae,
        corpus: &corpus,
        sae_cfg: &cfg.sae,
        train,
        val,
        base: &cfg.simpo,
        epochs: cfg.analysis.sweep_epochs,
        seed: cfg.seed,
    };
    let points = default_sweep_points(model.config().n_layers, &cfg.analysis.sweep_alphas);
    let rows = sweep(&inputs, &points)?;
    for r in &rows {
        match (&r.error, r.val_loss, r.mean_l0) {
            (None, Some(loss), Some(l0)) => println!("{:<28} loss {loss:.6}  mean l0 {l0:.3}", r.label),
            (e, _, _) => println!("{:<28} failed: {}", r.label, e.as_deref().unwrap_or("unknown")),
        }
    }
    ctx.csv(&ctx.out.report("sweep.csv"), &rows)
}

fn verify_theory(ctx: &Ctx) -> Result<()> {
    let a = &ctx.cfg.analysis;
    let rep = run_suite(ctx.cfg.seed, a.theory_trials, a.theory_d, a.theory_d_sae, a.theory_perturbations)?;
    let rows: Vec<TheoryRow> = rep
        .k_values
        .iter()
        .zip(&rep.ranks)
        .enumerate()
        .map(|(trial, (&k, &r))| TheoryRow {
            trial,
            k,
            numerical_rank: r,
            bound: k.min(rep.d),
            holds: r <= k.min(rep.d),
        })
        .collect();
    ctx.csv(&ctx.out.report("theory.csv"), &rows)?;
    let summary = TheorySummary {
        trials: rep.trials,
        d: rep.d,
        d_sae: rep.d_sae,
        affine_holds: rep.affine_holds,
        max_affine_residual: rep.max_affine_residual,
        rank_holds: rep.rank_holds,
        product_rank_holds: rep.product_rank_holds,
        induced_holds: rep.induced_holds,
        max_induced_residual: rep.max_induced_residual,
    };
    ctx.csv(&ctx.out.report("theory_summary.csv"), &[summary])?;
    let text = format!(
        "local affine identity: {}/{} (max residual {:.3e})\n\
         rank(A) <= min(k, d): {}/{}\n\
         rank(W A) <= min(d', k): {}/{}\n\
         induced weight update: {}/{} (max residual {:.3e})\n",
        rep.affine_holds,
        rep.trials,
        rep.max_affine_residual,
        rep.rank_holds,
        rep.trials,
        rep.product_rank_holds,
        rep.trials,
        rep.induced_holds,
        rep.trials,
        rep.max_induced_residual
    );
    print!("{text}");
    write_file(&ctx.out.report("theory.txt"), text.as_bytes())?;
    if !rep.all_hold() {
        return Err(Error::Training("theory checks found violations".into()));
    }
    Ok(())
}

fn grad_check(ctx: &Ctx) -> Result<()> {
    let outcomes = run_grad_oracles(ctx.cfg.seed, ctx.cfg.analysis.grad_check_instances)?;
    let mut by_path: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    for o in &outcomes {
        let e = by_path.entry(o.path.as_str()).or_insert((0, 0, 0.0));
        e.0 += 1;
        e.1 += usize::from(o.passed);
        e.2 = e.2.max(o.max_rel_error);
    }
    for (path, (n, ok, worst)) in &by_path {
        println!("{path:<30} {ok}/{n} passed, max relative error {worst:.3e}");
    }
    ctx.csv(&ctx.out.report("grad_check.csv"), &outcomes)?;
    if outcomes.iter().any(|o| !o.passed) {
        return Err(Error::Training("gradient check failed".into()));
    }
    Ok(())
}
