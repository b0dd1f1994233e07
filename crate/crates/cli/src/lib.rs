//! `jsvd` subcommands: decompose, verify, budget, bench.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use jsvd_core::budget::{baseline_report, compression_report, plan_ranks, uniform_plan, GroupSpec, ModelSpec, RankPlan};
use jsvd_core::conv::{conv2d, factor_kernels, forward_dual, forward_split, max_abs_diff, FeatureMap};
use jsvd_core::joint::{decompose, Factorization, GroupFactorization, Method};
use jsvd_core::model_io::{
    artifact_cf, group_iterations, load_factorized, load_model, read_manifest, save_factorized, DecomposedGroup,
    FactorizedArtifact, GroupEntry, Model, ModelManifest, DEFAULT_P, REPORT_FILE,
};
use jsvd_core::{apportion_rank, reconstruct_member, unfold, CompressionReport, Precision, Shape4};

pub const WARMUP_RUNS: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "jsvd", version, about = "Joint SVD compression of convolution layer groups")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose every group and write the factorized artifact.
    Decompose(DecomposeArgs),
    /// Check a factorized artifact against the original weights.
    Verify(VerifyArgs),
    /// Parameter, CF and MAC/FLOP accounting.
    Budget(BudgetArgs),
    /// Time direct against split forwards of every decomposed layer.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model manifest (model.json).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; defaults to a folder next to the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PlanArgs {
    /// Overrides every group's method.
    #[arg(long)]
    pub method: Option<Method>,
    /// Total rank for every group.
    #[arg(long, conflicts_with = "target_cf")]
    pub rank: Option<usize>,
    /// Plan ranks to reach this compression factor.
    #[arg(long)]
    pub target_cf: Option<f64>,
    /// Fraction of the rank given to the left-shared part [default: 0.5].
    #[arg(long)]
    pub p: Option<f64>,
    /// Dual-method iterations [default: 30].
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Storage precision of the factors.
    #[arg(long, default_value = "f64")]
    pub precision: Precision,
    /// Overwrite an existing artifact.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BudgetArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Timed runs per forward after warmup.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    ChecksFailed,
}

pub fn run(cli: Cli) -> Result<Status> {
    let threads = match &cli.command {
        Command::Decompose(a) => a.common.threads,
        Command::Verify(a) => a.common.threads,
        Command::Budget(a) => a.common.threads,
        Command::Bench(a) => a.common.threads,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("building thread pool")?;
    pool.install(|| match cli.command {
        Command::Decompose(a) => cmd_decompose(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Budget(a) => cmd_budget(&a),
        Command::Bench(a) => cmd_bench(&a),
    })
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Artifact directory for decompose/verify/bench.
pub fn artifact_dir(common: &CommonArgs) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| manifest_dir(&common.manifest).join("factorized"))
}

fn check_plan_args(plan: &PlanArgs) -> Result<()> {
    if let Some(p) = plan.p {
        if !(0.0..=1.0).contains(&p) {
            bail!("--p must lie in [0, 1], got {p}");
        }
    }
    if plan.k == Some(0) {
        bail!("--k must be at least 1");
    }
    if plan.rank == Some(0) {
        bail!("--rank must be at least 1");
    }
    Ok(())
}

fn effective_p(plan: &PlanArgs) -> f64 {
    plan.p.unwrap_or(DEFAULT_P)
}

fn split_rank(method: Method, r: usize, p: f64) -> (usize, usize) {
    match method {
        Method::Rjsvd => (r, 0),
        Method::Ljsvd => (0, r),
        Method::Bijsvd => apportion_rank(r, p),
    }
}

/// Plans ranks for every group: `--rank` and `--target-cf` override the
/// manifest; otherwise each group uses its own ranks or its own `target_cf`,
/// planned over that group's layers alone. `None` if some group has neither.
fn resolve_plan(manifest: &ModelManifest, plan: &PlanArgs) -> Result<Option<(ModelSpec, Vec<GroupSpec>, RankPlan)>> {
    if manifest.groups.is_empty() {
        bail!("the manifest defines no groups");
    }
    let spec = manifest.model_spec()?;
    let p = effective_p(plan);
    let mut groups = manifest.group_specs(plan.method, plan.p)?;

    if let Some(target) = plan.target_cf {
        groups.iter_mut().for_each(|g| g.fixed = None);
        let rp = plan_ranks(&spec, &groups, p, target)?;
        return Ok(Some((spec, groups, rp)));
    }

    let mut ranks = BTreeMap::new();
    for (g, entry) in groups.iter().zip(&manifest.groups) {
        let gp = plan.p.or(entry.p).unwrap_or(DEFAULT_P);
        let r = match (plan.rank, g.fixed, entry.target_cf) {
            (Some(r), _, _) => split_rank(g.method, r, gp),
            (None, Some(r), _) => r,
            (None, None, Some(target)) => {
                let sub = ModelSpec {
                    layers: spec
                        .layers
                        .iter()
                        .filter(|l| g.members.contains(&l.name))
                        .cloned()
                        .collect(),
                    other_params: 0,
                };
                let one = GroupSpec { fixed: None, ..g.clone() };
                let e = plan_ranks(&sub, std::slice::from_ref(&one), gp, target)
                    .with_context(|| format!("planning group {}", g.group_id))?
                    .entries[0];
                (e.r_r, e.r_l)
            }
            (None, None, None) => return Ok(None),
        };
        ranks.insert(g.group_id, r);
    }
    let rp = uniform_plan(&spec, &groups, p, &ranks)?;
    Ok(Some((spec, groups, rp)))
}

fn print_report(label: &str, r: &CompressionReport) {
    println!("{label}:");
    println!("  params       {} -> {}", r.params_before, r.params_after);
    println!("  other params {}", r.other_params);
    println!("  cf           {:.6}", r.cf);
    println!("  macs         {} -> {}", r.macs_before, r.macs_after);
    println!("  flops (2/mac) {:.4e} -> {:.4e}", r.flops_before as f64, r.flops_after as f64);
}

pub fn cmd_decompose(args: &DecomposeArgs) -> Result<Status> {
    check_plan_args(&args.plan)?;
    let model = load_model(&args.common.manifest)?;
    let (spec, groups, plan) = resolve_plan(&model.manifest, &args.plan)?.ok_or_else(|| {
        anyhow!("some groups have no ranks in the manifest; pass --rank or --target-cf")
    })?;

    let jobs: Vec<(&GroupEntry, &GroupSpec)> = model.manifest.groups.iter().zip(&groups).collect();
    let decomposed: Vec<DecomposedGroup> = jobs
        .par_iter()
        .map(|&(entry, g)| {
            let e = plan.entry(g.group_id).expect("plan covers every group");
            let k = group_iterations(entry, args.plan.k);
            let p = args.plan.p.or(entry.p).unwrap_or(DEFAULT_P);
            let group = model.layer_group(entry)?;
            let factorization = decompose(&group, g.method, e.r_r, e.r_l, k)
                .with_context(|| format!("decomposing group {}", g.group_id))?;
            Ok(DecomposedGroup {
                group,
                factorization,
                p,
                k,
            })
        })
        .collect::<Result<_>>()?;

    let residuals = decomposed.iter().map(|d| d.factorization.residual_sq()).collect();
    let report = compression_report(&spec, &groups, &plan, residuals)?;
    let out = artifact_dir(&args.common);
    let path = save_factorized(&out, &decomposed, &report, args.precision, args.force)?;

    for d in &decomposed {
        let (r_r, r_l) = d.factorization.ranks();
        println!(
            "group {} {} r_r={} r_l={} residual_sq={:.6e}",
            d.group.group_id(),
            d.factorization.method(),
            r_r,
            r_l,
            d.factorization.residual_sq()
        );
    }
    print_report("report", &report);
    println!("wrote {}", path.display());
    Ok(Status::Ok)
}

/// Largest tolerated max-abs difference between direct and split forwards.
pub fn verify_threshold(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-9,
        Precision::F32 => 1e-4,
    }
}

fn split_forward(f: &GroupFactorization, n: usize, shape: Shape4, x: &FeatureMap, stride: usize) -> Result<FeatureMap> {
    let right = f
        .right()
        .map(|r| factor_kernels(&r.member_us[n], &r.shared_v, shape))
        .transpose()?;
    let left = f
        .left()
        .map(|l| factor_kernels(&l.shared_u, &l.member_vs[n], shape))
        .transpose()?;
    Ok(match (right, left) {
        (Some((ru, rv)), Some((lu, lv))) => forward_dual(x, (&ru, &rv), (&lu, &lv), stride)?,
        (Some((u, v)), None) | (None, Some((u, v))) => forward_split(x, &u, &v, stride)?,
        (None, None) => bail!("factorization has no parts"),
    })
}

struct Layer<'a> {
    index: usize,
    name: &'a str,
    group: usize,
    member: usize,
    recorded_residual: f64,
}

fn layers(artifact: &FactorizedArtifact) -> Vec<Layer<'_>> {
    let mut out = Vec::new();
    for (gi, g) in artifact.manifest.groups.iter().enumerate() {
        for (n, m) in g.members.iter().enumerate() {
            out.push(Layer {
                index: out.len(),
                name: &m.name,
                group: gi,
                member: n,
                recorded_residual: m.residual_sq,
            });
        }
    }
    out
}

fn layer_input(model: &Model, name: &str, seed: u64, index: usize) -> Result<(FeatureMap, usize)> {
    let t = model
        .manifest
        .tensor(name)
        .ok_or_else(|| anyhow!("artifact layer `{name}` is not in the model manifest"))?;
    let [h, w] = t.input_hw;
    Ok((FeatureMap::random(h, w, t.shape[2], seed.wrapping_add(index as u64)), t.stride))
}

struct LayerCheck {
    name: String,
    diff: f64,
    residual: f64,
    problems: Vec<String>,
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<Status> {
    let model = load_model(&args.common.manifest)?;
    let dir = artifact_dir(&args.common);
    let artifact = load_factorized(&dir)?;
    let threshold = verify_threshold(artifact.manifest.precision);
    let corrupted = artifact.corrupted_members();
    let seed = args.common.seed;
    println!("seed {seed}, threshold {threshold:e}");

    let checks: Vec<LayerCheck> = layers(&artifact)
        .par_iter()
        .map(|l| {
            let f = &artifact.factorizations[l.group];
            let w = model
                .tensors
                .get(l.name)
                .ok_or_else(|| anyhow!("no weights for `{}`", l.name))?;
            let shape = w.shape();
            let approx = f.approximation(l.member)?;
            let residual = unfold(w).sub(&approx)?.frobenius_norm_sq();
            let recon = reconstruct_member(f, l.member, shape)?;
            let (x, stride) = layer_input(&model, l.name, seed, l.index)?;
            let direct = conv2d(&x, &recon, stride, stride)?;
            let split = split_forward(f, l.member, shape, &x, stride)?;
            let diff = max_abs_diff(&direct, &split)?;

            let mut problems = Vec::new();
            if corrupted.iter().any(|c| c == l.name) {
                problems.push("factor digest mismatch".to_string());
            }
            let tol = 1e-12 * l.recorded_residual.max(1e-300);
            if (residual - l.recorded_residual).abs() > tol {
                problems.push(format!(
                    "residual {residual:.6e} differs from recorded {:.6e}",
                    l.recorded_residual
                ));
            }
            if !(diff <= threshold) {
                problems.push(format!("max abs diff {diff:e} exceeds {threshold:e}"));
            }
            Ok(LayerCheck {
                name: l.name.to_string(),
                diff,
                residual,
                problems,
            })
        })
        .collect::<Result<_>>()?;

    for c in &checks {
        let verdict = if c.problems.is_empty() { "ok".to_string() } else { format!("FAIL ({})", c.problems.join("; ")) };
        println!("{}: max_abs_diff={:.3e} residual_sq={:.6e} {verdict}", c.name, c.diff, c.residual);
    }
    let mut failing: Vec<&str> = checks.iter().filter(|c| !c.problems.is_empty()).map(|c| c.name.as_str()).collect();

    let cf = artifact_cf(&model.manifest, &artifact.manifest)?;
    let cf_ok = cf == artifact.manifest.report.cf;
    println!("cf {cf:.6} (report {:.6}) {}", artifact.manifest.report.cf, if cf_ok { "ok" } else { "FAIL" });

    if !failing.is_empty() || !cf_ok {
        if !cf_ok {
            failing.push("<compression factor>");
        }
        eprintln!("verify failed: {}", failing.join(", "));
        return Ok(Status::ChecksFailed);
    }
    Ok(Status::Ok)
}

pub fn cmd_budget(args: &BudgetArgs) -> Result<Status> {
    check_plan_args(&args.plan)?;
    let manifest = read_manifest(&args.common.manifest)?;
    let spec = manifest.model_spec()?;
    let baseline = baseline_report(&spec);
    print_report("baseline", &baseline);

    let planned = if manifest.groups.is_empty() {
        None
    } else {
        resolve_plan(&manifest, &args.plan)?
    };
    let mut doc = serde_json::json!({ "baseline": baseline });
    match &planned {
        Some((spec, groups, plan)) => {
            for e in &plan.entries {
                println!("group {} {} r_r={} r_l={}", e.group_id, e.method, e.r_r, e.r_l);
            }
            let report = compression_report(spec, groups, plan, Vec::new())?;
            print_report("planned", &report);
            doc["plan"] = serde_json::to_value(plan)?;
            doc["planned"] = serde_json::to_value(&report)?;
        }
        None => println!("no rank plan (pass --rank or --target-cf)"),
    }

    let out = args
        .common
        .out
        .clone()
        .unwrap_or_else(|| manifest_dir(&args.common.manifest).join("budget"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(Status::Ok)
}

fn mean_time<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<Duration> {
    for _ in 0..WARMUP_RUNS {
        std::hint::black_box(f()?);
    }
    let start = Instant::now();
    for _ in 0..repeats {
        std::hint::black_box(f()?);
    }
    Ok(start.elapsed() / repeats as u32)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<Status> {
    if args.repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let model = load_model(&args.common.manifest)?;
    let artifact = load_factorized(&artifact_dir(&args.common))?;
    let spec = model.manifest.model_spec()?;
    println!("seed {}, {WARMUP_RUNS} warmup runs, {} repeats", args.common.seed, args.repeats);
    for l in layers(&artifact) {
        let f = &artifact.factorizations[l.group];
        let w = model
            .tensors
            .get(l.name)
            .ok_or_else(|| anyhow!("no weights for `{}`", l.name))?;
        let (x, stride) = layer_input(&model, l.name, args.common.seed, l.index)?;
        let direct = mean_time(args.repeats, || Ok(conv2d(&x, w, stride, stride)?))?;
        let split = mean_time(args.repeats, || split_forward(f, l.member, w.shape(), &x, stride))?;
        let conv = &spec
            .layers
            .iter()
            .find(|s| s.name == l.name)
            .expect("layer present in spec")
            .conv;
        let (r_r, r_l) = f.ranks();
        let mac_ratio = jsvd_core::macs_decomposed(conv, r_r, r_l) as f64 / jsvd_core::macs_conv(conv) as f64;
        let path = if r_r > 0 && r_l > 0 { "dual" } else { "split" };
        println!(
            "{}: direct {:.3} ms, {path} {:.3} ms, time ratio {:.3}, mac ratio {:.3}",
            l.name,
            direct.as_secs_f64() * 1e3,
            split.as_secs_f64() * 1e3,
            split.as_secs_f64() / direct.as_secs_f64(),
            mac_ratio
        );
    }
    Ok(Status::Ok)
}
