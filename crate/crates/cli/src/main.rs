//! `nlunmix`: stage-by-stage and end-to-end nonlinear unmixing.
//!
//! Every stage reads a directory and writes a new one. Files of the input
//! directory are copied forward, so each output directory is
//! self-contained for the next stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use nlunmix::baselines::{fcls, vca};
use nlunmix::embed::{LleWeights, PcaBasis};
use nlunmix::gp::{GpPredictor, MeanBasis};
use nlunmix::io::{load_matrix, parse_key_values, save_matrix, save_matrix_csv, write_key_values};
use nlunmix::llgplvm::{map_p, scg_optimize, LatentState, ModelContext};
use nlunmix::pipeline::{
    endmember_csv, recipe_overrides, reduce, run_pipeline, scale_latents, write_outputs, ExperimentConfig,
    Reduction,
};
use nlunmix::scenegen::{generate, MixingModel, SceneRecipe};
use nlunmix::scg::ScgOptions;
use nlunmix::HyperImage;

#[derive(Parser)]
#[command(name = "nlunmix", version, about = "Unsupervised nonlinear spectral unmixing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene.
    Gen(GenArgs),
    /// Center the image, compute the PCA basis, LLE weights and initial latents.
    Reduce(ReduceArgs),
    /// Fit the LL-GPLVM.
    Fit(FitArgs),
    /// Fit the minimum-volume simplex to the latents.
    Scale(StageArgs),
    /// Predict endmember spectra at the simplex vertices.
    Endmembers(EndmemberArgs),
    /// VCA endmembers and FCLS abundances.
    Baseline(BaselineArgs),
    /// Run a whole experiment from a key=value config.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Optional key=value file with scene keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<MixingModel>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    amax: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated GBM coefficients.
    #[arg(long)]
    gbm_gamma: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReduceArgs {
    #[command(flatten)]
    io: StageArgs,
    /// Number of endmembers; defaults to the scene's `r`.
    #[arg(long)]
    r: Option<usize>,
    /// LLE neighbors; defaults to R.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    io: StageArgs,
    #[arg(long, default_value_t = 1e3)]
    gamma: f64,
    #[arg(long, default_value_t = ScgOptions::default().max_iter)]
    max_iter: usize,
    #[arg(long, default_value_t = ScgOptions::default().tol)]
    tol: f64,
}

#[derive(Args)]
struct EndmemberArgs {
    #[command(flatten)]
    io: StageArgs,
    /// GP prior mean basis: `prior` (PCA basis) or `posterior` (MAP basis).
    #[arg(long, default_value = "prior")]
    gp_mean: MeanBasis,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    io: StageArgs,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Reduce(a) => cmd_reduce(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Scale(a) => cmd_scale(a),
        Command::Endmembers(a) => cmd_endmembers(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Copies the regular files of `from` into a freshly created `to`.
fn carry_forward(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).with_context(|| format!("creating {}", to.display()))?;
    if from == to {
        return Ok(());
    }
    for entry in fs::read_dir(from).with_context(|| format!("reading {}", from.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            fs::copy(entry.path(), to.join(entry.file_name()))?;
        }
    }
    Ok(())
}

fn load(dir: &Path, name: &str) -> Result<DMatrix<f64>> {
    let path = dir.join(name);
    load_matrix(&path).with_context(|| format!("loading {}", path.display()))
}

fn read_kv(dir: &Path, name: &str) -> Result<BTreeMap<String, String>> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_key_values(&text)?)
}

fn kv_num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = map.get(key).with_context(|| format!("missing key '{key}'"))?;
    v.parse().map_err(|_| anyhow::anyhow!("bad value for '{key}': {v:?}"))
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut map = match &a.config {
        Some(p) => parse_key_values(&fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    };
    set("model", a.model.map(|m| m.to_string()));
    set("n", a.n.map(|v| v.to_string()));
    set("r", a.r.map(|v| v.to_string()));
    set("l", a.l.map(|v| v.to_string()));
    set("sigma2", a.sigma2.map(|v| v.to_string()));
    set("amax", a.amax.map(|v| v.to_string()));
    set("seed", a.seed.map(|v| v.to_string()));
    set("gbm_gamma", a.gbm_gamma);
    let mut recipe = SceneRecipe::desk(MixingModel::Linear, 1.0, 0);
    recipe_overrides(&mut recipe, &map)?;
    let scene = generate(&recipe).context("gen")?;
    fs::create_dir_all(&a.out)?;
    save_matrix(scene.image.pixels(), &a.out.join("Y.bin"))?;
    save_matrix(scene.abundances.values(), &a.out.join("A_true.bin"))?;
    save_matrix(scene.endmembers.spectra(), &a.out.join("M_true.bin"))?;
    write_key_values(&a.out.join("scene.cfg"), recipe.to_pairs())?;
    Ok(())
}

fn scene_r(dir: &Path, r: Option<usize>) -> Result<usize> {
    match r {
        Some(r) => Ok(r),
        None => kv_num(&read_kv(dir, "scene.cfg")?, "r").context("pass --r or provide scene.cfg"),
    }
}

fn cmd_reduce(a: ReduceArgs) -> Result<()> {
    let StageArgs { input, out } = a.io;
    let r = scene_r(&input, a.r)?;
    let k = a.k.unwrap_or(r);
    let img = HyperImage::new(load(&input, "Y.bin")?)?;
    let red = reduce(&img, r, k).context("reduce")?;
    carry_forward(&input, &out)?;
    save_matrix(&red.pca.basis, &out.join("pbar.bin"))?;
    save_matrix_csv(&column(&red.pca.eigenvalues), &out.join("eigenvalues.csv"))?;
    save_matrix(&column(&red.mean), &out.join("mean.bin"))?;
    save_matrix(&red.x0, &out.join("x0.bin"))?;
    let mut lambda = String::from("i,j,lambda\n");
    for (i, j, w) in red.lle.triplets() {
        lambda.push_str(&format!("{i},{j},{w:e}\n"));
    }
    fs::write(out.join("lambda.csv"), lambda)?;
    write_key_values(
        &out.join("reduce.cfg"),
        [
            ("r", r.to_string()),
            ("k", k.to_string()),
            ("residual_variance", format!("{:e}", red.pca.residual_variance)),
        ],
    )?;
    Ok(())
}

fn load_lambda(path: &Path, n: usize) -> Result<LleWeights> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut triplets = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            bail!("{}:{}: expected i,j,lambda", path.display(), ln + 1);
        }
        let parse_err = || anyhow::anyhow!("{}:{}: bad number", path.display(), ln + 1);
        triplets.push((
            f[0].parse().map_err(|_| parse_err())?,
            f[1].parse().map_err(|_| parse_err())?,
            f[2].parse().map_err(|_| parse_err())?,
        ));
    }
    Ok(LleWeights::from_triplets(n, &triplets)?)
}

/// Rebuilds the `reduce` outputs stored in `dir`.
fn load_reduction(dir: &Path) -> Result<Reduction> {
    let y = load(dir, "Y.bin")?;
    let mean = DVector::from_column_slice(load(dir, "mean.bin")?.as_slice());
    let mut yc = y;
    for mut row in yc.row_iter_mut() {
        row -= mean.transpose();
    }
    let meta = read_kv(dir, "reduce.cfg")?;
    let eig = load(dir, "eigenvalues.csv")?;
    let pca = PcaBasis {
        basis: load(dir, "pbar.bin")?,
        eigenvalues: DVector::from_column_slice(eig.as_slice()),
        residual_variance: kv_num(&meta, "residual_variance")?,
    };
    let lle = load_lambda(&dir.join("lambda.csv"), yc.nrows())?;
    Ok(Reduction {
        yc,
        mean,
        pca,
        lle,
        x0: load(dir, "x0.bin")?,
    })
}

fn load_state(dir: &Path) -> Result<LatentState> {
    let params = read_kv(dir, "fit.cfg")?;
    Ok(LatentState {
        x: load(dir, "x.bin")?,
        u: load(dir, "u.bin")?,
        s2: kv_num(&params, "s2")?,
        sigma2: kv_num(&params, "sigma2")?,
    })
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let StageArgs { input, out } = a.io;
    let red = load_reduction(&input)?;
    let opts = ScgOptions {
        max_iter: a.max_iter,
        tol: a.tol,
        ..Default::default()
    };
    let ctx = ModelContext::new(red.yc.clone(), red.pca.basis.clone(), red.lle.clone(), a.gamma)?;
    let state0 = nlunmix::llgplvm::initial_state(&ctx, red.x0.clone(), red.pca.residual_variance)
        .context("fit")?;
    let (state, report) = scg_optimize(&state0, &ctx, &opts).context("fit")?;
    let p_hat = map_p(&state, &ctx).context("fit")?;
    carry_forward(&input, &out)?;
    save_matrix(&state.x, &out.join("x.bin"))?;
    save_matrix(&state.u, &out.join("u.bin"))?;
    save_matrix(&p_hat, &out.join("p_hat.bin"))?;
    write_key_values(
        &out.join("fit.cfg"),
        [
            ("s2", format!("{:e}", state.s2)),
            ("sigma2", format!("{:e}", state.sigma2)),
            ("gamma", format!("{:e}", a.gamma)),
            ("iterations", report.iterations.to_string()),
            ("converged", report.converged.to_string()),
            ("gradient_norm", format!("{:e}", report.gradient_norm)),
        ],
    )?;
    let mut trace = String::from("iteration,neg_log_posterior\n");
    for (i, v) in report.trace.iter().enumerate() {
        trace.push_str(&format!("{i},{v:e}\n"));
    }
    fs::write(out.join("trace.csv"), trace)?;
    Ok(())
}

fn cmd_scale(a: StageArgs) -> Result<()> {
    let x = load(&a.input, "x.bin")?;
    let fit = scale_latents(&x).context("scale")?;
    let (xc, v_r) = fit.constrained_latents();
    carry_forward(&a.input, &a.out)?;
    save_matrix(fit.abundances.values(), &a.out.join("abundances.bin"))?;
    save_matrix(&fit.vertices, &a.out.join("vertices.bin"))?;
    save_matrix(&v_r, &a.out.join("v_r.bin"))?;
    save_matrix(&xc, &a.out.join("xc.bin"))?;
    write_key_values(
        &a.out.join("scale.cfg"),
        [
            ("volume", format!("{:e}", fit.volume)),
            ("initial_volume", format!("{:e}", fit.initial_volume)),
        ],
    )?;
    Ok(())
}

fn cmd_endmembers(a: EndmemberArgs) -> Result<()> {
    let StageArgs { input, out } = a.io;
    let red = load_reduction(&input)?;
    let mut state = load_state(&input)?;
    state.x = load(&input, "xc.bin")?;
    let v_r = load(&input, "v_r.bin")?;
    let pred = GpPredictor::new(&state, &red.yc, &red.pca.basis, &v_r, &red.mean, a.gp_mean)
        .and_then(|p| p.extract_endmembers())
        .context("endmembers")?;
    carry_forward(&input, &out)?;
    fs::write(out.join("endmembers.csv"), endmember_csv(&pred))?;
    save_matrix(pred.endmembers.spectra(), &out.join("endmembers.bin"))?;
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let StageArgs { input, out } = a.io;
    let r = scene_r(&input, a.r)?;
    let img = HyperImage::new(load(&input, "Y.bin")?)?;
    let m = vca(&img, r, a.seed).context("baseline")?;
    let ab = fcls(img.pixels(), &m).context("baseline")?;
    carry_forward(&input, &out)?;
    save_matrix(m.spectra(), &out.join("vca_endmembers.bin"))?;
    save_matrix(ab.values(), &out.join("fcls_abundances.bin"))?;
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let out = run_pipeline(&cfg)?;
    write_outputs(&out, &out_dir)?;
    print!("{}", out.report.to_csv());
    Ok(())
}
