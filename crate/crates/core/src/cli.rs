//! Experiment runner: one TOML config in, `table.csv` plus `manifest.toml` out.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::annulus::{InnerMapModel, InnerRemainder, MapFamily, MapModel, ScatteringMapModel, Space};
use crate::blender::{build_chart, certify_cs_blender, certify_double_blender, covering_check, AffineBoxMap, BoxMap, Orientation};
use crate::config::{preset_blender_config, preset_model_config, BlenderConfig, ModelConfig};
use crate::error::Error;
use crate::linearization::{ab_spectrum, compute_n0, linearize_table};
use crate::melnikov::{hormander_check, melnikov_eval, torsion_check, MelnikovModel, Perturbation, Potential, TrigPotential};
use crate::mixing::{calibrate_core, plan_mix, verify_lengths, verify_mix, Ball, MixOptions, Phase};
use crate::nhim::{solve_bvp, BvpOptions, FiberNonlinearity, FiberRate, LocalModel};
use crate::reachability::{reach_plan, reach_plan_forward, ForwardOptions, ReachOptions, Rotation};
use crate::skew::{comparison_sweep, RemainderFamily, SkewSystem};

pub const THREADS_ENV: &str = "SYMBLEND_THREADS";
const GOLDEN: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Parser)]
#[command(name = "symblend", version, about = "Blender, mixing, reachability, shadowing and Melnikov experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for `table.csv` and `manifest.toml`.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to $SYMBLEND_THREADS, then to rayon's choice.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Certify a cs-blender (and optionally a double blender) on a preset
    BlenderCertify,
    /// Covering radius of an affine toy or a blender chart
    CoverCheck,
    /// Plan and verify mixing words between two balls
    PlanMix,
    /// Commutator-based eps-reachability plans, optionally forward-only
    Reach,
    /// Skew-product orbit comparisons under decaying remainders
    SkewShadow,
    /// Boundary-value orbits near a normally hyperbolic cylinder
    NhimBvp,
    /// Melnikov series, torsion and bracket-rank checks
    Melnikov {
        #[arg(long, value_enum)]
        check: Option<MelnikovCheck>,
    },
    /// Hyperbolic eigenvalues of the linearized blocks S T^n
    Linearize,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BlenderCertify => "blender-certify",
            Command::CoverCheck => "cover-check",
            Command::PlanMix => "plan-mix",
            Command::Reach => "reach",
            Command::SkewShadow => "skew-shadow",
            Command::NhimBvp => "nhim-bvp",
            Command::Melnikov { .. } => "melnikov",
            Command::Linearize => "linearize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MelnikovCheck {
    #[default]
    Series,
    B3,
    B6,
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable, empty or invalid config (exit 2).
    Schema(String),
    /// The computation itself failed (exit 1).
    Compute(Error),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Compute(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Schema(m),
            other => CliError::Compute(other),
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Schema(m) => write!(f, "config error: {m}"),
            CliError::Compute(e) => write!(f, "computation failed: {e}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Comma-separated numeric table.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(cols: &[&str]) -> Self {
        Table { header: cols.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn s<T: Display>(x: T) -> String {
    x.to_string()
}

/// Results of one run: main table, optional extra tables, and measured constants.
#[derive(Debug, Default)]
struct Outcome {
    table: Table,
    extra: Vec<(String, Table)>,
    measured: toml::Table,
}

impl Outcome {
    fn measure<V: Into<toml::Value>>(&mut self, key: &str, v: V) {
        self.measured.insert(key.to_string(), v.into());
    }
}

pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("symblend {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

fn thread_count(cli: &Cli) -> CliResult<Option<usize>> {
    if let Some(n) = cli.threads {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::Schema(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let threads = thread_count(cli)?;
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Schema("thread count must be positive".into()));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let path = cli.config.as_ref().ok_or_else(|| CliError::Schema("--config is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Err(CliError::Schema("empty config".into()));
    }
    let raw: toml::Table = toml::from_str(&text).map_err(|e| CliError::Schema(e.to_string()))?;
    if raw.is_empty() {
        return Err(CliError::Schema("empty config".into()));
    }
    fs::create_dir_all(&cli.out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", cli.out.display())))?;
    let result = dispatch(cli, &text);
    let mut manifest = toml::Table::new();
    let mut run = toml::Table::new();
    run.insert("subcommand".into(), cli.command.name().into());
    run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    run.insert("config_path".into(), path.display().to_string().into());
    if let Some(seed) = cli.seed {
        run.insert("seed_override".into(), (seed as i64).into());
    }
    if let Some(n) = threads {
        run.insert("threads".into(), (n as i64).into());
    }
    match &result {
        Ok(_) => {
            run.insert("status".into(), "ok".into());
        }
        Err(e) => {
            run.insert("status".into(), "failed".into());
            run.insert("error".into(), e.to_string().into());
        }
    }
    manifest.insert("run".into(), run.into());
    manifest.insert("config".into(), raw.into());
    if let Ok(out) = &result {
        manifest.insert("measured".into(), out.measured.clone().into());
        write(&cli.out.join("table.csv"), &out.table.to_csv())?;
        for (name, t) in &out.extra {
            write(&cli.out.join(name), &t.to_csv())?;
        }
    }
    let text = toml::to_string(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    write(&cli.out.join("manifest.toml"), &text)?;
    result.map(|_| ())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn parse<T: DeserializeOwned>(text: &str) -> CliResult<T> {
    toml::from_str(text).map_err(|e| CliError::Schema(e.to_string()))
}

fn dispatch(cli: &Cli, text: &str) -> CliResult<Outcome> {
    match cli.command {
        Command::BlenderCertify => blender_certify(parse(text)?, cli.seed),
        Command::CoverCheck => cover_check(parse(text)?),
        Command::PlanMix => plan_mix_cmd(parse(text)?, cli.seed),
        Command::Reach => reach(parse(text)?, cli.seed),
        Command::SkewShadow => skew_shadow(parse(text)?, cli.seed),
        Command::NhimBvp => nhim_bvp(parse(text)?),
        Command::Melnikov { check } => melnikov(parse(text)?, check),
        Command::Linearize => linearize(parse(text)?),
    }
}

/// `preset = "d1"` or an inline `[model]` table (exactly one).
fn model_source(preset: &Option<String>, model: &Option<ModelConfig>) -> CliResult<(ModelConfig, Option<String>)> {
    match (preset, model) {
        (Some(p), None) => Ok((preset_model_config(p)?, Some(p.clone()))),
        (None, Some(m)) => Ok((m.clone(), None)),
        (Some(_), Some(_)) => Err(CliError::Schema("give either preset or [model], not both".into())),
        (None, None) => Err(CliError::Schema("missing model: set preset or [model]".into())),
    }
}

fn blender_source(preset: &Option<String>, blender: &Option<BlenderConfig>) -> CliResult<BlenderConfig> {
    match (blender, preset) {
        (Some(b), _) => Ok(b.clone()),
        (None, Some(p)) => Ok(preset_blender_config(p)?),
        (None, None) => Err(CliError::Schema("missing [blender] table".into())),
    }
}

fn positive(x: f64, what: &str) -> CliResult<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(CliError::Schema(format!("{what} must be positive")))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlenderCertifyConfig {
    preset: Option<String>,
    model: Option<ModelConfig>,
    blender: Option<BlenderConfig>,
    #[serde(default = "cs")]
    orientation: Orientation,
    /// Also intersect with the involution-conjugate cu blender.
    #[serde(default)]
    double: bool,
}

fn cs() -> Orientation {
    Orientation::Cs
}

fn blender_certify(cfg: BlenderCertifyConfig, seed: Option<u64>) -> CliResult<Outcome> {
    let (mc, _) = model_source(&cfg.preset, &cfg.model)?;
    let model = mc.build()?;
    let mut bc = blender_source(&cfg.preset, &cfg.blender)?;
    if let Some(sd) = seed {
        bc.certify.seed = sd;
    }
    let eps = bc.eps.unwrap_or(model.eps);
    let chart = build_chart(&model, eps, &bc.chart, cfg.orientation)?;
    let cert = certify_cs_blender(&chart, &bc.certify)?;
    let mut out = Outcome { table: Table::new(&["probe", "levels", "min_ratio", "final_width", "angle", "certified"]), ..Default::default() };
    for (k, p) in cert.probes.iter().enumerate() {
        out.table.push(vec![s(k), s(p.word.len()), s(p.min_ratio()), s(p.widths.last().copied().unwrap_or(0.0)), s(p.angle), s(p.certified)]);
    }
    out.measure("eps", eps);
    out.measure("n_eps", chart.n_eps as i64);
    out.measure("n_star", cert.n_star as i64);
    out.measure("iterates", cert.n_set.len() as i64);
    out.measure("a", cert.a);
    out.measure("a_min", bc.a_min);
    out.measure("covered", cert.covered);
    out.measure("lambda_bar", cert.lambda_bar);
    out.measure("lambda_under", cert.lambda_under);
    out.measure("c_net", cert.c_net);
    out.measure("b_net", cert.b_net);
    out.measure("certified", cert.certified as i64);
    out.measure("probes", cert.probes.len() as i64);
    out.measure("min_ratio", cert.min_ratio);
    out.measure("growth_holds", cert.growth_holds());
    out.measure("seed", bc.certify.seed as i64);
    if cfg.double {
        let other = chart.with_orientation(match cfg.orientation {
            Orientation::Cs => Orientation::Cu,
            Orientation::Cu => Orientation::Cs,
        });
        let other_cert = certify_cs_blender(&other, &bc.certify)?;
        let (cs_c, cs_cert, cu_c, cu_cert) = match cfg.orientation {
            Orientation::Cs => (&chart, &cert, &other, &other_cert),
            Orientation::Cu => (&other, &other_cert, &chart, &cert),
        };
        let rep = certify_double_blender(cs_c, cs_cert, cu_c, cu_cert, bc.certify.angle_floor)?;
        out.measure("double_found", rep.found);
        out.measure("double_angle", rep.angle);
    }
    if cert.a < bc.a_min || !cert.all_certified() {
        return Err(CliError::Compute(Error::Verification(format!(
            "{}/{} probes certified, a = {} (floor {})",
            cert.certified,
            cert.probes.len(),
            cert.a,
            bc.a_min
        ))));
    }
    Ok(out)
}

/// 1-D affine toy `(xi, eta) -> (b + c xi, e eta)` per translation `b`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineToy {
    translations: Vec<f64>,
    #[serde(default = "half")]
    contraction: f64,
    #[serde(default = "two")]
    expansion: f64,
}

fn half() -> f64 {
    0.5
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoverCheckConfig {
    #[serde(default = "grid_res")]
    grid_res: f64,
    toy: Option<AffineToy>,
    preset: Option<String>,
    model: Option<ModelConfig>,
    blender: Option<BlenderConfig>,
}

fn grid_res() -> f64 {
    0.01
}

fn cover_check(cfg: CoverCheckConfig) -> CliResult<Outcome> {
    positive(cfg.grid_res, "grid_res")?;
    let mut out = Outcome { table: Table::new(&["maps", "grid_res", "covered", "a"]), ..Default::default() };
    let rep = if let Some(toy) = &cfg.toy {
        if cfg.preset.is_some() || cfg.model.is_some() {
            return Err(CliError::Schema("give either [toy] or a chart model, not both".into()));
        }
        if toy.translations.is_empty() {
            return Err(CliError::Schema("toy needs at least one translation".into()));
        }
        let maps: Vec<AffineBoxMap> = toy
            .translations
            .iter()
            .map(|&b| AffineBoxMap::diagonal(&[b, 0.0], &[toy.contraction, toy.expansion]))
            .collect::<crate::Result<_>>()?;
        let refs: Vec<&dyn BoxMap> = maps.iter().map(|m| m as &dyn BoxMap).collect();
        out.measure("source", "affine_toy");
        let rep = covering_check(&refs, cfg.grid_res)?;
        out.table.push(vec![s(maps.len()), s(cfg.grid_res), s(rep.covered), s(rep.a)]);
        rep
    } else {
        let (mc, _) = model_source(&cfg.preset, &cfg.model)?;
        let model = mc.build()?;
        let bc = blender_source(&cfg.preset, &cfg.blender)?;
        let eps = bc.eps.unwrap_or(model.eps);
        let chart = build_chart(&model, eps, &bc.chart, Orientation::Cs)?;
        let maps = chart.maps();
        let refs: Vec<&dyn BoxMap> = maps.iter().map(|m| m as &dyn BoxMap).collect();
        out.measure("source", "chart");
        out.measure("eps", eps);
        out.measure("a_min", bc.a_min);
        let rep = covering_check(&refs, cfg.grid_res)?;
        out.table.push(vec![s(maps.len()), s(cfg.grid_res), s(rep.covered), s(rep.a)]);
        rep
    };
    out.measure("covered", rep.covered);
    out.measure("a", rep.a);
    if let Some(w) = &rep.witness {
        out.measure("witness", w.clone());
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BallConfig {
    center: Vec<f64>,
    radius: f64,
}

impl BallConfig {
    fn ball(&self) -> CliResult<Ball> {
        positive(self.radius, "ball radius")?;
        if self.center.len() != 2 {
            return Err(CliError::Schema("ball centers are (phi, J) pairs".into()));
        }
        Ok(Ball::new(&self.center, self.radius))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanMixConfig {
    preset: Option<String>,
    model: Option<ModelConfig>,
    blender: Option<BlenderConfig>,
    b0: BallConfig,
    b1: BallConfig,
    #[serde(default)]
    options: MixOptions,
    /// Also verify the padded words of lengths `L..=L + lengths_span`.
    #[serde(default)]
    lengths_span: usize,
}

fn plan_mix_cmd(cfg: PlanMixConfig, seed: Option<u64>) -> CliResult<Outcome> {
    let (mc, _) = model_source(&cfg.preset, &cfg.model)?;
    let model = mc.build()?;
    let bc = blender_source(&cfg.preset, &cfg.blender)?;
    let (b0, b1) = (cfg.b0.ball()?, cfg.b1.ball()?);
    let mut opts = cfg.options.clone();
    if let Some(sd) = seed {
        opts.seed = sd;
    }
    let eps = model.eps;
    let cs = build_chart(&model, eps, &bc.chart, Orientation::Cs)?;
    let cu = build_chart(&model, eps, &bc.chart, Orientation::Cu)?;
    let cert = certify_cs_blender(&cs, &bc.certify)?;
    let mut out = Outcome { table: Table::new(&["step", "phase", "target_side", "letters", "phi", "J"]), ..Default::default() };
    if opts.c_core.is_none() {
        let c = calibrate_core(&model, eps, &cs, &cu, opts.approach_n_max)?;
        opts.c_core = Some(c);
    }
    out.measure("c_core", opts.c_core.unwrap_or(0.0));
    let plan = plan_mix(&model, eps, &b0, &b1, &cs, &cert, &cu, &opts)?;
    for (k, st) in plan.steps.iter().enumerate() {
        let phase = match st.phase {
            Phase::Climb => "climb",
            Phase::Approach => "approach",
            Phase::Blend => "blend",
        };
        out.table.push(vec![s(k), s(phase), s(st.target_side), s(st.word.flat_len()), s(st.point[0]), s(st.point[1])]);
    }
    let verdict = verify_mix(&model, eps, &plan.word, &b0, &b1, opts.mc_samples, opts.seed)?;
    out.measure("length", plan.length as i64);
    out.measure("word", plan.word.to_string());
    out.measure("landing_error", plan.landing_error);
    out.measure("blend_depth", plan.blend_depth as i64);
    out.measure("hits", verdict.hits as i64);
    out.measure("samples_used", verdict.samples_used as i64);
    out.measure("verified", verdict.verified);
    out.measure("seed", opts.seed as i64);
    if cfg.lengths_span > 0 {
        let checks = verify_lengths(&model, eps, &plan, &b0, &b1, cfg.lengths_span, &opts)?;
        let mut t = Table::new(&["length", "hits", "samples_used", "verified"]);
        for c in &checks {
            t.push(vec![s(c.length), s(c.verdict.hits), s(c.verdict.samples_used), s(c.verdict.verified)]);
        }
        out.measure("lengths_verified", checks.iter().filter(|c| c.verdict.verified).count() as i64);
        out.extra.push(("lengths.csv".into(), t));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReachConfig {
    eps: f64,
    /// Explicit `[[phi0, J0], [phi1, J1]]` pairs.
    #[serde(default)]
    pairs: Vec<[[f64; 2]; 2]>,
    /// Additional random pairs with `J` in `[-j_range, j_range]`.
    #[serde(default)]
    random: usize,
    #[serde(default = "j_range")]
    j_range: f64,
    #[serde(default = "seven")]
    seed: u64,
    #[serde(default = "k_box")]
    k_box: f64,
    #[serde(default = "max_order")]
    max_order: usize,
    /// Also convert each plan to forward-only blocks over a golden rotation with unit twist.
    #[serde(default)]
    forward: bool,
    /// Block budget per forward plan.
    #[serde(default)]
    max_blocks: Option<usize>,
}

fn j_range() -> f64 {
    0.2
}

fn seven() -> u64 {
    7
}

fn k_box() -> f64 {
    2.0
}

fn max_order() -> usize {
    2
}

fn reach(cfg: ReachConfig, seed: Option<u64>) -> CliResult<Outcome> {
    use rand::{RngExt, SeedableRng};
    positive(cfg.eps, "eps")?;
    positive(cfg.k_box, "k_box")?;
    let mut pairs: Vec<(DVector<f64>, DVector<f64>)> = cfg.pairs.iter().map(|[a, b]| (DVector::from_column_slice(a), DVector::from_column_slice(b))).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.seed));
    for _ in 0..cfg.random {
        let z = DVector::from_column_slice(&[rng.random::<f64>(), rng.random_range(-cfg.j_range..cfg.j_range)]);
        let zs = DVector::from_column_slice(&[rng.random::<f64>(), rng.random_range(-cfg.j_range..cfg.j_range)]);
        pairs.push((z, zs));
    }
    if pairs.is_empty() {
        return Err(CliError::Schema("no pairs: give pairs or random > 0".into()));
    }
    let (k, dk) = (ScatteringMapModel::default_kick(1), ScatteringMapModel::drift_kick(1));
    let maps: [&dyn MapFamily; 2] = [&k, &dk];
    let opts = ReachOptions { k_box: cfg.k_box, max_order: cfg.max_order, ..ReachOptions::default() };
    let inner = InnerMapModel::new(vec![GOLDEN], DMatrix::identity(1, 1), InnerRemainder::Zero, 0.38)?;
    let mut out = Outcome {
        table: Table::new(&["pair", "phi0", "J0", "phi1", "J1", "letters", "final_dist", "k_measured", "forward_dist", "gap_contract"]),
        ..Default::default()
    };
    let defaults = ForwardOptions::default();
    let fopts = ForwardOptions { max_blocks: cfg.max_blocks.unwrap_or(defaults.max_blocks), ..defaults };
    let mut worst: f64 = 0.0;
    let mut contracts = true;
    for (i, (z, zs)) in pairs.iter().enumerate() {
        let (plan, fwd) = if cfg.forward {
            let (p, f) = reach_plan_forward(z, zs, &inner, &maps, cfg.eps, &opts, &fopts)?;
            (p, Some(f))
        } else {
            (reach_plan(z, zs, &maps, cfg.eps, &opts)?, None)
        };
        worst = worst.max(plan.k_measured);
        let (fd, gc) = match &fwd {
            Some(f) => {
                contracts &= f.gap_contract_holds();
                (s(f.final_dist), s(f.gap_contract_holds()))
            }
            None => ("nan".into(), "nan".into()),
        };
        out.table.push(vec![s(i), s(z[0]), s(z[1]), s(zs[0]), s(zs[1]), s(plan.word.flat_len()), s(plan.final_dist), s(plan.k_measured), fd, gc]);
    }
    out.measure("pairs", pairs.len() as i64);
    out.measure("k_max", worst);
    if cfg.forward {
        out.measure("gap_contract", contracts);
    }
    out.measure("seed", seed.unwrap_or(cfg.seed) as i64);
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkewShadowConfig {
    preset: Option<String>,
    model: Option<ModelConfig>,
    remainder: RemainderFamily,
    /// Forward and backward comparisons, each.
    #[serde(default = "five_hundred")]
    comparisons: usize,
    #[serde(default = "two_u64")]
    seed: u64,
}

fn five_hundred() -> usize {
    500
}

fn two_u64() -> u64 {
    2
}

fn skew_shadow(cfg: SkewShadowConfig, seed: Option<u64>) -> CliResult<Outcome> {
    let (mc, _) = model_source(&cfg.preset, &cfg.model)?;
    let model: MapModel = mc.build()?;
    cfg.remainder.validate()?;
    let sys = SkewSystem::new(&model, model.eps, cfg.remainder.clone())?;
    let seed = seed.unwrap_or(cfg.seed);
    let rows = comparison_sweep(&sys, cfg.comparisons, model.scatterings.len(), seed)?;
    let mut out = Outcome { table: Table::new(&["index", "direction", "n", "lhs", "rhs", "holds"]), ..Default::default() };
    for r in &rows {
        out.table.push(vec![s(r.index), s(if r.backward { "backward" } else { "forward" }), s(r.n), s(r.lhs), s(r.rhs), s(r.holds)]);
    }
    out.measure("comparisons", rows.len() as i64);
    out.measure("violations", rows.iter().filter(|r| !r.holds).count() as i64);
    out.measure("seed", seed as i64);
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BvpPoint {
    q: f64,
    p_bar: f64,
    z: [f64; 2],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NhimBvpConfig {
    #[serde(default = "golden")]
    beta: f64,
    #[serde(default = "one")]
    twist: f64,
    #[serde(default = "gamma")]
    gamma: f64,
    eps: f64,
    lambda: FiberRate,
    mu: FiberRate,
    #[serde(default = "zero_nl")]
    nonlinear: FiberNonlinearity,
    delta0: f64,
    kappa: Option<u32>,
    points: Vec<BvpPoint>,
    ns: Vec<usize>,
    #[serde(default = "bvp_tol")]
    tol: f64,
    #[serde(default = "bvp_iter")]
    max_iter: usize,
}

fn golden() -> f64 {
    GOLDEN
}

fn one() -> f64 {
    1.0
}

fn gamma() -> f64 {
    0.38
}

fn zero_nl() -> FiberNonlinearity {
    FiberNonlinearity::Zero
}

fn bvp_tol() -> f64 {
    BvpOptions::default().tol
}

fn bvp_iter() -> usize {
    BvpOptions::default().max_iter
}

fn nhim_bvp(cfg: NhimBvpConfig) -> CliResult<Outcome> {
    positive(cfg.tol, "tol")?;
    if cfg.points.is_empty() || cfg.ns.is_empty() {
        return Err(CliError::Schema("points and ns must be nonempty".into()));
    }
    let inner = InnerMapModel::new(vec![cfg.beta], DMatrix::from_element(1, 1, cfg.twist), InnerRemainder::Zero, cfg.gamma)?;
    let model = LocalModel::new(inner, cfg.eps, cfg.lambda, cfg.mu, cfg.nonlinear, cfg.delta0, cfg.kappa)?;
    let opts = BvpOptions { max_iter: cfg.max_iter, tol: cfg.tol };
    let mut out = Outcome {
        table: Table::new(&["point", "n", "iterations", "residual", "orbit_defect", "contraction", "q_n", "p_0", "phi_n", "J_n"]),
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for (i, pt) in cfg.points.iter().enumerate() {
        let z = DVector::from_column_slice(&pt.z);
        for &n in &cfg.ns {
            let seg = solve_bvp(&model, pt.q, pt.p_bar, &z, n, &opts)?;
            worst = worst.max(seg.residual);
            let zn = &seg.z[n];
            out.table.push(vec![s(i), s(n), s(seg.iterations), s(seg.residual), s(seg.orbit_defect), s(seg.contraction), s(seg.q[n]), s(seg.p[0]), s(zn[0]), s(zn[1])]);
        }
    }
    out.measure("max_residual", worst);
    let dom = model.domination();
    out.measure("lambda_bar", dom.lambda_bar);
    out.measure("alpha", dom.alpha);
    Ok(out)
}

#[derive(Debug, Clone, Copy, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
enum SeriesPerturbation {
    /// `K0(x, phi) = x cos(2 pi phi)`.
    #[default]
    XCos,
    Zero,
    /// `K0(x, phi) = sin(2 pi phi)`, independent of `x`.
    ZOnly,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeriesConfig {
    /// Orbit `gamma_j = rate^|j|` toward `a = 0`.
    #[serde(default = "half")]
    rate: f64,
    /// Inner map: rotation of the circle by `rho`.
    #[serde(default = "half")]
    rho: f64,
    #[serde(default = "sixty")]
    j_max: usize,
    #[serde(default = "series_tol")]
    tol: f64,
    #[serde(default)]
    perturbation: SeriesPerturbation,
    points: Vec<f64>,
}

fn sixty() -> usize {
    60
}

fn series_tol() -> f64 {
    1e-10
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TorsionConfig {
    /// Evaluated at `J = 0`.
    potential: TrigPotential,
    a: Vec<Vec<f64>>,
    #[serde(default = "eight")]
    seeds_per_axis: usize,
}

fn eight() -> usize {
    8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HormanderConfig {
    potentials: Vec<TrigPotential>,
    samples: Vec<Vec<f64>>,
    #[serde(default)]
    depth: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MelnikovConfig {
    #[serde(default)]
    check: MelnikovCheck,
    series: Option<SeriesConfig>,
    b3: Option<TorsionConfig>,
    b6: Option<HormanderConfig>,
}

fn melnikov(cfg: MelnikovConfig, check: Option<MelnikovCheck>) -> CliResult<Outcome> {
    let missing = |name: &str| CliError::Schema(format!("check '{name}' needs a [{name}] table"));
    match check.unwrap_or(cfg.check) {
        MelnikovCheck::Series => melnikov_series(cfg.series.ok_or_else(|| missing("series"))?),
        MelnikovCheck::B3 => melnikov_torsion(cfg.b3.ok_or_else(|| missing("b3"))?),
        MelnikovCheck::B6 => melnikov_hormander(cfg.b6.ok_or_else(|| missing("b6"))?),
    }
}

fn melnikov_series(cfg: SeriesConfig) -> CliResult<Outcome> {
    positive(cfg.tol, "tol")?;
    if !(cfg.rate > 0.0 && cfg.rate < 1.0) {
        return Err(CliError::Schema("rate must lie in (0, 1)".into()));
    }
    let j = cfg.j_max as i64;
    let orbit: Vec<DVector<f64>> = (-j..=j).map(|k| DVector::from_element(1, cfg.rate.powi(k.abs() as i32))).collect();
    let k0: Perturbation = match cfg.perturbation {
        SeriesPerturbation::XCos => Box::new(|x: &DVector<f64>, z: &DVector<f64>| x[0] * (std::f64::consts::TAU * z[0]).cos()),
        SeriesPerturbation::Zero => Box::new(|_: &DVector<f64>, _: &DVector<f64>| 0.0),
        SeriesPerturbation::ZOnly => Box::new(|_: &DVector<f64>, z: &DVector<f64>| (std::f64::consts::TAU * z[0]).sin()),
    };
    let rot = Rotation { rho: cfg.rho, space: Space { dim: 1, periodic: 1 } };
    let model = MelnikovModel::new(DVector::zeros(1), orbit, Box::new(rot), 0.0, k0, 1.0)?;
    let mut out = Outcome { table: Table::new(&["phi", "value", "truncation", "tail_bound"]), ..Default::default() };
    for &phi in &cfg.points {
        let r = melnikov_eval(&model, &DVector::from_element(1, phi), cfg.tol)?;
        out.table.push(vec![s(phi), s(r.value), s(r.truncation), s(r.tail_bound)]);
    }
    out.measure("decay_c", model.decay_c);
    out.measure("decay_lambda", model.decay_lambda);
    out.measure("k0_lip", model.k0_lip);
    Ok(out)
}

fn melnikov_torsion(cfg: TorsionConfig) -> CliResult<Outcome> {
    let d = cfg.potential.d;
    cfg.potential.validate()?;
    if cfg.a.len() != d || cfg.a.iter().any(|r| r.len() != d) {
        return Err(CliError::Schema(format!("A must be {d} x {d}")));
    }
    let a = DMatrix::from_row_slice(d, d, &cfg.a.iter().flatten().copied().collect::<Vec<_>>());
    let pot = cfg.potential.clone();
    let l = move |phi: &DVector<f64>| {
        let mut z = DVector::zeros(2 * d);
        z.rows_mut(0, d).copy_from(phi);
        pot.value(&z).unwrap_or(f64::NAN)
    };
    let rep = torsion_check(&l, &a, cfg.seeds_per_axis)?;
    let mut out = Outcome { table: Table::new(&["index", "re", "im"]), ..Default::default() };
    for (k, (re, im)) in rep.eigenvalues.iter().enumerate() {
        out.table.push(vec![s(k), s(re), s(im)]);
    }
    if let Some(c) = &rep.critical {
        out.measure("critical", c.iter().copied().collect::<Vec<f64>>());
    }
    out.measure("simple", rep.simple);
    out.measure("real", rep.real);
    out.measure("nonzero", rep.nonzero);
    out.measure("minimum", rep.minimum);
    out.measure("passes", rep.passes);
    out.measure("reason", rep.reason.clone());
    Ok(out)
}

fn melnikov_hormander(cfg: HormanderConfig) -> CliResult<Outcome> {
    for p in &cfg.potentials {
        p.validate()?;
    }
    let refs: Vec<&dyn Potential> = cfg.potentials.iter().map(|p| p as &dyn Potential).collect();
    let samples: Vec<DVector<f64>> = cfg.samples.iter().map(|z| DVector::from_column_slice(z)).collect();
    if samples.is_empty() {
        return Err(CliError::Schema("b6 needs at least one sample".into()));
    }
    let rep = hormander_check(&refs, &samples, cfg.depth)?;
    let mut out = Outcome { table: Table::new(&["sample", "depth", "rank", "full"]), ..Default::default() };
    for (i, r) in rep.ranks.iter().enumerate() {
        for (depth, rank) in r.ranks.iter().enumerate() {
            out.table.push(vec![s(i), s(depth), s(rank), s(r.full)]);
        }
    }
    out.measure("min_rank", rep.min_rank() as i64);
    out.measure("passes", rep.passes);
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearizeConfig {
    preset: Option<String>,
    model: Option<ModelConfig>,
    /// Defaults to `ceil(N0 / eps)` from the spectrum of `AB`.
    n_eps: Option<u64>,
    ns: Vec<u64>,
}

fn linearize(cfg: LinearizeConfig) -> CliResult<Outcome> {
    let (mc, _) = model_source(&cfg.preset, &cfg.model)?;
    let model = mc.build()?;
    if cfg.ns.is_empty() {
        return Err(CliError::Schema("ns must be nonempty".into()));
    }
    let eps = model.eps;
    let spec = ab_spectrum(&model.inner.a, &model.b())?;
    let n0 = compute_n0(&spec.alphas, 1e-3)?;
    let n_eps = cfg.n_eps.unwrap_or((n0 / eps).ceil() as u64);
    let rows = linearize_table(&model, eps, n_eps, &cfg.ns)?;
    let d = model.d();
    let mut cols = vec!["n".to_string()];
    cols.extend((0..d).map(|i| format!("alpha_{i}")));
    cols.extend((0..d).map(|i| format!("lambda_{i}")));
    cols.push("residual".into());
    let mut out = Outcome { table: Table { header: cols, rows: vec![] }, ..Default::default() };
    for r in &rows {
        let mut row = vec![s(r.n)];
        row.extend(r.alphas_n.iter().map(s));
        row.extend(r.lambdas.iter().map(s));
        row.push(s(r.residual));
        out.table.push(row);
    }
    out.measure("n0", n0);
    out.measure("n_eps", n_eps as i64);
    out.measure("alphas", spec.alphas.to_vec());
    Ok(out)
}
