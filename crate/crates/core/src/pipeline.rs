//! End-to-end experiment: generate a scene, fit the LL-GPLVM, scale the
//! latents onto the simplex, predict endmembers, and score everything
//! against the ground truth (optionally next to VCA + FCLS).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::baselines::{fcls, vca};
use crate::embed::{init_latents, lle_weights, pca_basis, LleWeights, PcaBasis};
use crate::error::{Result, UnmixError};
use crate::gp::{EndmemberPrediction, GpPredictor, MeanBasis};
use crate::io::parse_key_values;
use crate::llgplvm::psi::feature_dim;
use crate::llgplvm::{initial_state, map_p, reconstruct, scg_optimize, FitReport, LatentState, ModelContext};
use crate::metrics::{align_columns, are, per_column_sam, rnmse};
use crate::scenegen::{generate, MixingModel, Scene, SceneRecipe};
use crate::scg::ScgOptions;
use crate::simplex::{fit_min_volume_simplex, SimplexFit};
use crate::spectra::{permute_columns, AbundanceMatrix, EndmemberSet, HyperImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Methods {
    pub fcll_gplvm: bool,
    pub vca_fcls: bool,
}

impl Default for Methods {
    fn default() -> Self {
        Self {
            fcll_gplvm: true,
            vca_fcls: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub recipe: SceneRecipe,
    /// LLE prior strength.
    pub gamma: f64,
    /// LLE neighbor count.
    pub k: usize,
    pub scg: ScgOptions,
    pub gp_mean: MeanBasis,
    /// Seed of the VCA random directions.
    pub vca_seed: u64,
    pub out: Option<PathBuf>,
    pub methods: Methods,
}

impl ExperimentConfig {
    pub fn new(recipe: SceneRecipe) -> Self {
        let k = recipe.n_endmembers;
        let vca_seed = recipe.seed;
        Self {
            recipe,
            gamma: 1e3,
            k,
            scg: ScgOptions::default(),
            gp_mean: MeanBasis::Prior,
            vca_seed,
            out: None,
            methods: Methods::default(),
        }
    }

    /// Parses the flat `key=value` format. Unknown keys are rejected.
    ///
    /// Keys: `model n r l sigma2 amax seed gbm_gamma gamma k max_iter tol
    /// gp_mean vca_seed out methods`.
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        Self::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        const KNOWN: [&str; 16] = [
            "model", "n", "r", "l", "sigma2", "amax", "seed", "gbm_gamma", "gamma", "k", "max_iter", "tol",
            "gp_mean", "vca_seed", "out", "methods",
        ];
        if let Some(k) = map.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(UnmixError::Parse(format!("unknown config key '{k}'")));
        }
        let model: MixingModel = map
            .get("model")
            .ok_or_else(|| UnmixError::Parse("config needs 'model'".into()))?
            .parse()?;
        let mut recipe = SceneRecipe::desk(model, 1.0, 0);
        recipe_overrides(&mut recipe, map)?;
        let mut cfg = Self::new(recipe);
        if let Some(v) = map.get("gamma") {
            cfg.gamma = parse_num(v, "gamma")?;
        }
        if let Some(v) = map.get("k") {
            cfg.k = parse_num(v, "k")?;
        }
        if let Some(v) = map.get("max_iter") {
            cfg.scg.max_iter = parse_num(v, "max_iter")?;
        }
        if let Some(v) = map.get("tol") {
            cfg.scg.tol = parse_num(v, "tol")?;
        }
        if let Some(v) = map.get("gp_mean") {
            cfg.gp_mean = v.parse()?;
        }
        if let Some(v) = map.get("vca_seed") {
            cfg.vca_seed = parse_num(v, "vca_seed")?;
        }
        if let Some(v) = map.get("out") {
            cfg.out = Some(PathBuf::from(v));
        }
        if let Some(v) = map.get("methods") {
            let mut m = Methods {
                fcll_gplvm: false,
                vca_fcls: false,
            };
            for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                match name {
                    "fcll_gplvm" => m.fcll_gplvm = true,
                    "vca_fcls" => m.vca_fcls = true,
                    other => return Err(UnmixError::Parse(format!("unknown method '{other}'"))),
                }
            }
            cfg.methods = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.recipe.validate()?;
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(UnmixError::InvalidArgument("gamma must be finite and > 0".into()));
        }
        if self.k == 0 || self.k >= self.recipe.n_pixels {
            return Err(UnmixError::InvalidArgument("need 1 <= k < n".into()));
        }
        if feature_dim(self.recipe.n_endmembers) >= self.recipe.n_pixels.min(self.recipe.n_bands + 1) {
            return Err(UnmixError::InvalidArgument(
                "too few pixels or bands for R(R+1)/2 principal components".into(),
            ));
        }
        if !self.methods.fcll_gplvm && !self.methods.vca_fcls {
            return Err(UnmixError::InvalidArgument("no method selected".into()));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| UnmixError::Parse(format!("bad value for '{key}': {v:?}")))
}

/// Applies the scene keys (`n r l sigma2 amax seed gbm_gamma`) of a config
/// map to `recipe`.
pub fn recipe_overrides(recipe: &mut SceneRecipe, map: &BTreeMap<String, String>) -> Result<()> {
    if let Some(v) = map.get("model") {
        recipe.model = v.parse()?;
    }
    if let Some(v) = map.get("n") {
        recipe.n_pixels = parse_num(v, "n")?;
    }
    if let Some(v) = map.get("r") {
        recipe.n_endmembers = parse_num(v, "r")?;
    }
    if let Some(v) = map.get("l") {
        recipe.n_bands = parse_num(v, "l")?;
    }
    if let Some(v) = map.get("sigma2") {
        recipe.sigma2 = parse_num(v, "sigma2")?;
    }
    if let Some(v) = map.get("amax") {
        recipe.amax = parse_num(v, "amax")?;
    }
    if let Some(v) = map.get("seed") {
        recipe.seed = parse_num(v, "seed")?;
    }
    if let Some(v) = map.get("gbm_gamma") {
        recipe.gamma = v
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_num(s, "gbm_gamma"))
            .collect::<Result<_>>()?;
    } else if recipe.model == MixingModel::GeneralizedBilinear {
        let pairs = recipe.n_endmembers * (recipe.n_endmembers - 1) / 2;
        if recipe.gamma.len() != pairs {
            recipe.gamma = (0..pairs).map(|i| [0.9, 0.5, 0.3][i % 3]).collect();
        }
    }
    Ok(())
}

/// Centering, PCA basis and LLE weights of an image.
#[derive(Debug, Clone)]
pub struct Reduction {
    pub yc: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// `D = R(R+1)/2` leading components.
    pub pca: PcaBasis,
    pub lle: LleWeights,
    pub x0: DMatrix<f64>,
}

pub fn reduce(img: &HyperImage, r: usize, k: usize) -> Result<Reduction> {
    let (centered, mean) = img.center()?;
    let yc = centered.into_pixels();
    let pca = pca_basis(&yc, feature_dim(r))?;
    let lle = lle_weights(&yc, k)?;
    let x0 = init_latents(&yc, &pca.leading(r - 1));
    Ok(Reduction { yc, mean, pca, lle, x0 })
}

/// Fitted LL-GPLVM with the MAP basis.
#[derive(Debug, Clone)]
pub struct LatentFit {
    pub state: LatentState,
    pub p_hat: DMatrix<f64>,
    pub report: FitReport,
}

pub fn fit_latents(red: &Reduction, gamma: f64, opts: &ScgOptions) -> Result<LatentFit> {
    let ctx = ModelContext::new(red.yc.clone(), red.pca.basis.clone(), red.lle.clone(), gamma)?;
    let state0 = initial_state(&ctx, red.x0.clone(), red.pca.residual_variance)?;
    let (state, report) = scg_optimize(&state0, &ctx, opts)?;
    let p_hat = map_p(&state, &ctx)?;
    Ok(LatentFit { state, p_hat, report })
}

/// Min-volume simplex over the first `R-1` latent coordinates.
pub fn scale_latents(x: &DMatrix<f64>) -> Result<SimplexFit> {
    let r = x.ncols();
    fit_min_volume_simplex(&x.columns(0, r - 1).into_owned())
}

pub fn predict_endmembers(
    fit: &LatentFit,
    simplex: &SimplexFit,
    red: &Reduction,
    variant: MeanBasis,
) -> Result<EndmemberPrediction> {
    let (xc, v_r) = simplex.constrained_latents();
    let state = LatentState {
        x: xc,
        ..fit.state.clone()
    };
    GpPredictor::new(&state, &red.yc, &red.pca.basis, &v_r, &red.mean, variant)?.extract_endmembers()
}

/// Scores of one unmixing method against the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScores {
    /// Reconstruction error of the method's own model of the image.
    pub are: f64,
    pub rnmse: f64,
    /// Per true endmember, in ground-truth order.
    pub sam: Vec<f64>,
    /// `permutation[r]` = estimated column matched to true endmember `r`.
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub recipe: SceneRecipe,
    pub gamma: f64,
    pub k: usize,
    pub vca_seed: u64,
    pub gp_mean: MeanBasis,
    pub ll_gplvm_are: Option<f64>,
    pub pca_are: f64,
    pub fit_iterations: Option<usize>,
    pub fit_converged: Option<bool>,
    pub fcll_gplvm: Option<MethodScores>,
    pub vca_fcls: Option<MethodScores>,
    /// Seconds per stage, in execution order. Not part of the CSV report.
    pub wall_clock: Vec<(&'static str, f64)>,
}

impl Report {
    /// Deterministic `method,metric,value` table; timings are written
    /// separately by [`Report::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,metric,value\n");
        for (k, v) in self.recipe.to_pairs() {
            let _ = writeln!(s, "scene,{k},\"{v}\"");
        }
        let _ = writeln!(s, "config,gamma,{:e}", self.gamma);
        let _ = writeln!(s, "config,k,{}", self.k);
        let _ = writeln!(s, "config,vca_seed,{}", self.vca_seed);
        let _ = writeln!(s, "config,gp_mean,{}", self.gp_mean);
        let _ = writeln!(s, "pca,are,{:e}", self.pca_are);
        if let Some(v) = self.ll_gplvm_are {
            let _ = writeln!(s, "ll_gplvm,are,{v:e}");
        }
        if let Some(v) = self.fit_iterations {
            let _ = writeln!(s, "ll_gplvm,iterations,{v}");
        }
        if let Some(v) = self.fit_converged {
            let _ = writeln!(s, "ll_gplvm,converged,{v}");
        }
        for (name, scores) in [("fcll_gplvm", &self.fcll_gplvm), ("vca_fcls", &self.vca_fcls)] {
            let Some(sc) = scores else { continue };
            let _ = writeln!(s, "{name},are,{:e}", sc.are);
            let _ = writeln!(s, "{name},rnmse,{:e}", sc.rnmse);
            for (r, v) in sc.sam.iter().enumerate() {
                let _ = writeln!(s, "{name},sam_{},{v:e}", r + 1);
            }
            let perm: Vec<String> = sc.permutation.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(s, "{name},permutation,\"{}\"", perm.join(" "));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("stage,seconds\n");
        for (stage, secs) in &self.wall_clock {
            let _ = writeln!(s, "{stage},{secs:.6}");
        }
        s
    }
}

/// Everything the pipeline produced, besides the report.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: Report,
    pub scene: Scene,
    pub reduction: Reduction,
    pub latent_fit: Option<LatentFit>,
    pub simplex: Option<SimplexFit>,
    pub endmembers: Option<EndmemberPrediction>,
    pub vca_endmembers: Option<EndmemberSet>,
    pub vca_abundances: Option<AbundanceMatrix>,
}

fn score(
    scene: &Scene,
    y_hat: &DMatrix<f64>,
    endmembers: &DMatrix<f64>,
    abundances: &DMatrix<f64>,
) -> Result<MethodScores> {
    let truth = scene.endmembers.spectra();
    let permutation = align_columns(truth, endmembers)?;
    let sam = per_column_sam(truth, endmembers, &permutation)?;
    let aligned = permute_columns(abundances, &permutation);
    Ok(MethodScores {
        are: are(scene.image.pixels(), y_hat)?,
        rnmse: rnmse(scene.abundances.values(), &aligned)?,
        sam,
        permutation,
    })
}

fn add_mean(mut y: DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    for mut row in y.row_iter_mut() {
        row += mean.transpose();
    }
    y
}

/// Runs every stage; errors carry the name of the failing stage.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let r = cfg.recipe.n_endmembers;
    let mut clock = Vec::new();
    let mut t = Instant::now();
    let mut lap = |name: &'static str, t: &mut Instant| {
        clock.push((name, t.elapsed().as_secs_f64()));
        *t = Instant::now();
    };

    let scene = generate(&cfg.recipe).map_err(|e| e.at_stage("gen"))?;
    lap("gen", &mut t);
    let reduction = reduce(&scene.image, r, cfg.k).map_err(|e| e.at_stage("reduce"))?;
    lap("reduce", &mut t);

    let pca_axes = reduction.pca.leading(r - 1);
    let pca_y = add_mean(&reduction.yc * &pca_axes * pca_axes.transpose(), &reduction.mean);
    let pca_are = are(scene.image.pixels(), &pca_y).map_err(|e| e.at_stage("metrics"))?;

    let mut out = PipelineOutput {
        report: Report {
            recipe: cfg.recipe.clone(),
            gamma: cfg.gamma,
            k: cfg.k,
            vca_seed: cfg.vca_seed,
            gp_mean: cfg.gp_mean,
            ll_gplvm_are: None,
            pca_are,
            fit_iterations: None,
            fit_converged: None,
            fcll_gplvm: None,
            vca_fcls: None,
            wall_clock: Vec::new(),
        },
        scene,
        reduction,
        latent_fit: None,
        simplex: None,
        endmembers: None,
        vca_endmembers: None,
        vca_abundances: None,
    };

    if cfg.methods.fcll_gplvm {
        let red = &out.reduction;
        let fit = fit_latents(red, cfg.gamma, &cfg.scg).map_err(|e| e.at_stage("fit"))?;
        lap("fit", &mut t);
        let y_ll = reconstruct(&fit.state.x, &fit.state.u, &fit.p_hat).map_err(|e| e.at_stage("fit"))?;
        out.report.ll_gplvm_are =
            Some(are(out.scene.image.pixels(), &add_mean(y_ll, &red.mean)).map_err(|e| e.at_stage("metrics"))?);
        out.report.fit_iterations = Some(fit.report.iterations);
        out.report.fit_converged = Some(fit.report.converged);

        let simplex = scale_latents(&fit.state.x).map_err(|e| e.at_stage("scale"))?;
        lap("scale", &mut t);
        let endm = predict_endmembers(&fit, &simplex, red, cfg.gp_mean).map_err(|e| e.at_stage("endmembers"))?;
        lap("endmembers", &mut t);

        let (xc, _) = simplex.constrained_latents();
        let y_fc = reconstruct(&xc, &fit.state.u, &fit.p_hat).map_err(|e| e.at_stage("metrics"))?;
        let scores = score(
            &out.scene,
            &add_mean(y_fc, &red.mean),
            endm.endmembers.spectra(),
            simplex.abundances.values(),
        )
        .map_err(|e| e.at_stage("metrics"))?;
        out.report.fcll_gplvm = Some(scores);
        out.latent_fit = Some(fit);
        out.simplex = Some(simplex);
        out.endmembers = Some(endm);
    }

    if cfg.methods.vca_fcls {
        let m = vca(&out.scene.image, r, cfg.vca_seed).map_err(|e| e.at_stage("baseline"))?;
        let a = fcls(out.scene.image.pixels(), &m).map_err(|e| e.at_stage("baseline"))?;
        lap("baseline", &mut t);
        let y_hat = a.values() * m.spectra().transpose();
        let scores = score(&out.scene, &y_hat, m.spectra(), a.values()).map_err(|e| e.at_stage("metrics"))?;
        out.report.vca_fcls = Some(scores);
        out.vca_endmembers = Some(m);
        out.vca_abundances = Some(a);
    }
    out.report.wall_clock = clock;
    Ok(out)
}

/// Long-format plot data: `kind,index,c1,...` with `kind` one of `latent`
/// (fitted latents, R columns), `pca` (scores on the leading R-1 axes) and
/// `vertex` (simplex vertices, R-1 columns). Short rows are padded with
/// empty fields.
pub fn plot_data_csv(out: &PipelineOutput) -> String {
    let r = out.report.recipe.n_endmembers;
    let header: Vec<String> = (1..=r).map(|c| format!("c{c}")).collect();
    let mut s = format!("kind,index,{}\n", header.join(","));
    let mut emit = |kind: &str, m: &DMatrix<f64>| {
        for (i, row) in m.row_iter().enumerate() {
            let mut fields: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            fields.resize(r, String::new());
            let _ = writeln!(s, "{kind},{i},{}", fields.join(","));
        }
    };
    if let Some(fit) = &out.latent_fit {
        emit("latent", &fit.state.x);
    }
    let scores = &out.reduction.yc * out.reduction.pca.leading(r - 1);
    emit("pca", &scores);
    if let Some(sx) = &out.simplex {
        emit("vertex", &sx.vertices.transpose());
    }
    s
}

/// `band,mean_1,var_1,lo95_1,hi95_1,...` for predicted endmembers.
pub fn endmember_csv(pred: &EndmemberPrediction) -> String {
    let spectra = pred.endmembers.spectra();
    let (l, r) = spectra.shape();
    let zero = DMatrix::zeros(l, r);
    let var = pred.endmembers.band_variance().unwrap_or(&zero);
    let mut s = String::from("band");
    for j in 1..=r {
        let _ = write!(s, ",mean_{j},var_{j},lo95_{j},hi95_{j}");
    }
    s.push('\n');
    for b in 0..l {
        let _ = write!(s, "{b}");
        for j in 0..r {
            let _ = write!(
                s,
                ",{:e},{:e},{:e},{:e}",
                spectra[(b, j)],
                var[(b, j)],
                pred.lower95[(b, j)],
                pred.upper95[(b, j)]
            );
        }
        s.push('\n');
    }
    s
}

/// Writes `report.csv`, `timing.csv`, `plot.csv` and, when available,
/// `endmembers.csv` into `dir`.
pub fn write_outputs(out: &PipelineOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), out.report.to_csv())?;
    fs::write(dir.join("timing.csv"), out.report.timing_csv())?;
    fs::write(dir.join("plot.csv"), plot_data_csv(out))?;
    if let Some(e) = &out.endmembers {
        fs::write(dir.join("endmembers.csv"), endmember_csv(e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_with_defaults() {
        let cfg = ExperimentConfig::parse("model = gbm\nseed=7\n# comment\namax=0.9\n").unwrap();
        assert_eq!(cfg.recipe.model, MixingModel::GeneralizedBilinear);
        assert_eq!(cfg.recipe.seed, 7);
        assert_eq!(cfg.recipe.amax, 0.9);
        assert_eq!(cfg.recipe.gamma, vec![0.9, 0.5, 0.3]);
        assert_eq!(cfg.gamma, 1e3);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.vca_seed, 7);
        assert_eq!(cfg.methods, Methods::default());
    }

    #[test]
    fn config_rejects_bad_input() {
        assert!(ExperimentConfig::parse("seed=1").is_err());
        assert!(ExperimentConfig::parse("model=lmm\nfoo=1").is_err());
        assert!(ExperimentConfig::parse("model=lmm\nmethods=svm").is_err());
        assert!(ExperimentConfig::parse("model=lmm\nmethods=").is_err());
        assert!(ExperimentConfig::parse("model=lmm\nk=0").is_err());
        assert!(ExperimentConfig::parse("model=lmm\ngamma=x").is_err());
        let cfg = ExperimentConfig::parse("model=lmm\nr=4\nk=5\nmethods=vca_fcls").unwrap();
        assert_eq!(cfg.k, 5);
        assert!(!cfg.methods.fcll_gplvm);
    }

    #[test]
    fn infeasible_recipe_fails_validation() {
        let mut cfg = ExperimentConfig::new(SceneRecipe {
            n_pixels: 40,
            n_bands: 12,
            ..SceneRecipe::desk(MixingModel::Linear, 1.0, 3)
        });
        cfg.recipe.amax = 0.2;
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(matches!(err, UnmixError::InvalidArgument(_)));
    }

    #[test]
    fn zero_iterations_still_produce_a_report() {
        let mut cfg = ExperimentConfig::new(SceneRecipe {
            n_pixels: 40,
            n_bands: 12,
            ..SceneRecipe::desk(MixingModel::Linear, 1.0, 3)
        });
        cfg.scg.max_iter = 0;
        cfg.methods.vca_fcls = false;
        let out = run_pipeline(&cfg).unwrap();
        assert_eq!(out.report.fit_iterations, Some(0));
        assert!(out.report.fcll_gplvm.is_some());
    }
}
