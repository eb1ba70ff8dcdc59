//! Command implementations. Every command is a thin adapter: resolve the
//! config (defaults ← config file ← flags), call the corresponding
//! library operation, write the outputs, and record exactly one manifest.
//! No numerical logic lives here.

use std::fmt;
use std::path::{Path, PathBuf};

use dpq_core::{
    asymmetric_bench, decoder_forward, fit_codebook, finetune_lora, plan_budget, pq_decode,
    pq_encode, raw_bench, select_points, solve_map_qp, symmetric_bench, synth_descriptors,
    synth_scene, train, BenchResult, Codebook, CompressionProblem, DecoderWeights, DescriptorSet,
    DpqError, KernelKind, LoraDelta, QuantizedIndex, Result as CoreResult, ScenePointSet,
    TrainConfig, TrainReport, DEFAULT_QP_ITERS,
};

use crate::args::{
    BudgetArgs, Cli, Command, CompressMapArgs, DequantizeArgs, EvalArgs, FinetuneLoraArgs,
    FitArgs, QuantizeArgs, SynthDescriptorsArgs, SynthSceneArgs, SynthWhat, TrainArgs,
};
use crate::kv::{resolve, KvFile};
use crate::manifest::{manifest_path, RunManifest};

/// Command-level failure: either a usage problem this binary detected or
/// an error from the library.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(DpqError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<DpqError> for CliError {
    fn from(e: DpqError) -> CliError {
        CliError::Core(e)
    }
}

impl CliError {
    /// Stable, documented exit code (see `--help`).
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.kind() {
                "config" => 3,
                "input" => 4,
                "io" => 5,
                "format" => 6,
                "dimension" => 7,
                "numeric" => 8,
                "integrity" => 9,
                "batch_too_small" => 10,
                "infeasible" => 11,
                "training" => 12,
                _ => 1,
            },
        }
    }
}

type CmdResult = Result<(), CliError>;

/// Global flags every command consumes.
pub struct Ctx {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Ctx {
    fn require_out(&self, command: &str) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| {
            CliError::Usage(format!("--out is required for '{command}'"))
        })
    }
}

pub fn dispatch(cli: &Cli) -> CmdResult {
    let ctx = Ctx {
        seed: cli.seed,
        config: cli.config.clone(),
        out: cli.out.clone(),
    };
    match &cli.command {
        Command::Synth {
            what: SynthWhat::Descriptors(a),
        } => cmd_synth_descriptors(&ctx, a),
        Command::Synth {
            what: SynthWhat::Scene(a),
        } => cmd_synth_scene(&ctx, a),
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::FinetuneLora(a) => cmd_finetune_lora(&ctx, a),
        Command::Quantize(a) => cmd_quantize(&ctx, a),
        Command::Dequantize(a) => cmd_dequantize(&ctx, a),
        Command::CompressMap(a) => cmd_compress_map(&ctx, a),
        Command::Budget(a) => cmd_budget(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
    }
}

fn cmd_synth_descriptors(ctx: &Ctx, a: &SynthDescriptorsArgs) -> CmdResult {
    const LABEL: &str = "synth descriptors";
    let kv = KvFile::load(ctx.config.as_deref())?;
    kv.allow_only(&["clusters", "per_cluster", "dim", "spread", "seed"])?;
    let clusters = resolve(a.clusters, kv.get("clusters")?, 32);
    let per_cluster = resolve(a.per_cluster, kv.get("per_cluster")?, 200);
    let dim = resolve(a.dim, kv.get("dim")?, 64);
    let spread = resolve(a.spread, kv.get("spread")?, 0.08);
    let seed = resolve(ctx.seed, kv.get("seed")?, 0);
    let out = ctx.require_out(LABEL)?;

    let set = synth_descriptors(clusters, per_cluster, dim, spread, seed)?;
    set.save(out)?;

    let config = format!(
        "clusters={clusters}\nper_cluster={per_cluster}\ndim={dim}\nspread={spread}\nseed={seed}\n"
    );
    let mut manifest = RunManifest::new(LABEL, seed, config);
    manifest.add_output(out)?;
    manifest.write(&manifest_path(Some(out), LABEL))?;
    Ok(())
}

fn cmd_synth_scene(ctx: &Ctx, a: &SynthSceneArgs) -> CmdResult {
    const LABEL: &str = "synth scene";
    let kv = KvFile::load(ctx.config.as_deref())?;
    kv.allow_only(&["points", "clusters", "seed"])?;
    let points = resolve(a.points, kv.get("points")?, 512);
    let clusters = resolve(a.clusters, kv.get("clusters")?, 16);
    let seed = resolve(ctx.seed, kv.get("seed")?, 0);
    let out = ctx.require_out(LABEL)?;

    let scene = synth_scene(points, clusters, seed)?;
    scene.save(out)?;

    let config = format!("points={points}\nclusters={clusters}\nseed={seed}\n");
    let mut manifest = RunManifest::new(LABEL, seed, config);
    manifest.add_output(out)?;
    manifest.write(&manifest_path(Some(out), LABEL))?;
    Ok(())
}

fn cmd_fit(ctx: &Ctx, a: &FitArgs) -> CmdResult {
    const LABEL: &str = "fit";
    let kv = KvFile::load(ctx.config.as_deref())?;
    kv.allow_only(&["m", "k", "iters", "seed"])?;
    let m = resolve(a.m, kv.get("m")?, 4);
    let k = resolve(a.k, kv.get("k")?, 16);
    let iters = resolve(a.iters, kv.get("iters")?, 25);
    let seed = resolve(ctx.seed, kv.get("seed")?, 0);
    let out = ctx.require_out(LABEL)?;

    let set = DescriptorSet::load(&a.input)?;
    let cb = fit_codebook(&set, m, k, iters, seed)?;
    cb.save(out)?;

    let config = format!("m={m}\nk={k}\niters={iters}\nseed={seed}\n");
    let mut manifest = RunManifest::new(LABEL, seed, config);
    manifest.add_input(&a.input)?;
    manifest.add_output(out)?;
    manifest.write(&manifest_path(Some(out), LABEL))?;
    Ok(())
}

/// Build the training config from defaults ← config file ← flags ← --seed.
fn resolve_train_config(
    ctx: &Ctx,
    overrides: &[(&str, Option<String>)],
) -> Result<TrainConfig, CliError> {
    let mut cfg = match ctx.config.as_deref() {
        Some(path) => TrainConfig::parse(&std::fs::read_to_string(path).map_err(DpqError::from)?)?,
        None => TrainConfig::default(),
    };
    for (key, value) in overrides {
        if let Some(value) = value {
            cfg.set_key(key, value)?;
        }
    }
    if let Some(seed) = ctx.seed {
        cfg.set_key("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn log_epochs(report: &TrainReport) {
    let total = report.epochs.len();
    for e in &report.epochs {
        eprintln!(
            "epoch {}/{} train_loss={} val_loss={} recon_mean={} recall1={}",
            e.epoch, total, e.train_loss, e.val_loss, e.recon_mean, e.recall1
        );
    }
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> CmdResult {
    const LABEL: &str = "train";
    let overrides = [
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("margin", a.margin.map(|v| v.to_string())),
        ("tau", a.tau.map(|v| v.to_string())),
        ("lambda_d", a.lambda_d.map(|v| v.to_string())),
        ("m", a.m.map(|v| v.to_string())),
        ("k", a.k.map(|v| v.to_string())),
        ("hidden", a.hidden.clone()),
        ("lora_rank", a.lora_rank.map(|v| v.to_string())),
        ("lora_mode", a.lora_mode.map(|v| v.to_string())),
        ("loss_variant", a.loss_variant.clone()),
        ("npair_n", a.npair_n.map(|v| v.to_string())),
    ];
    let cfg = resolve_train_config(ctx, &overrides)?;
    let stem = ctx.require_out(LABEL)?;

    let set = DescriptorSet::load(&a.input)?;
    let trained = train(&set, &cfg)?;
    log_epochs(&trained.report);

    let cbk = with_suffix(stem, "cbk");
    let dec = with_suffix(stem, "dec");
    let rpt = with_suffix(stem, "rpt");
    trained.codebook.save(&cbk)?;
    trained.decoder.save(&dec)?;
    std::fs::write(&rpt, trained.report.to_text()).map_err(DpqError::from)?;

    let mut manifest = RunManifest::new(LABEL, cfg.seed, cfg.to_config_string());
    manifest.add_input(&a.input)?;
    manifest.add_output(&cbk)?;
    manifest.add_output(&dec)?;
    manifest.add_output(&rpt)?;
    manifest.write(&manifest_path(Some(stem), LABEL))?;
    Ok(())
}

fn cmd_finetune_lora(ctx: &Ctx, a: &FinetuneLoraArgs) -> CmdResult {
    const LABEL: &str = "finetune-lora";
    let overrides = [
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("margin", a.margin.map(|v| v.to_string())),
        ("tau", a.tau.map(|v| v.to_string())),
        ("lambda_d", a.lambda_d.map(|v| v.to_string())),
        ("lora_rank", a.lora_rank.map(|v| v.to_string())),
        ("loss_variant", a.loss_variant.clone()),
        ("npair_n", a.npair_n.map(|v| v.to_string())),
        // Adapter training by definition.
        ("lora_mode", Some("true".to_string())),
    ];
    let cfg = resolve_train_config(ctx, &overrides)?;
    let stem = ctx.require_out(LABEL)?;

    let set = DescriptorSet::load(&a.input)?;
    let cb = Codebook::load(&a.codebook)?;
    let base = DecoderWeights::load(&a.decoder)?;
    let (adapted, report) = finetune_lora(&set, &cb, &base, &cfg)?;
    log_epochs(&report);

    let delta = adapted.delta().ok_or_else(|| {
        DpqError::Integrity("fine-tuned decoder carries no adapter".into())
    })?;
    let dlt = with_suffix(stem, "dlt");
    let rpt = with_suffix(stem, "rpt");
    delta.save(&dlt)?;
    std::fs::write(&rpt, report.to_text()).map_err(DpqError::from)?;

    let mut manifest = RunManifest::new(LABEL, cfg.seed, cfg.to_config_string());
    manifest.add_input(&a.input)?;
    manifest.add_input(&a.codebook)?;
    manifest.add_input(&a.decoder)?;
    manifest.add_output(&dlt)?;
    manifest.add_output(&rpt)?;
    manifest.write(&manifest_path(Some(stem), LABEL))?;
    Ok(())
}

fn cmd_quantize(ctx: &Ctx, a: &QuantizeArgs) -> CmdResult {
    const LABEL: &str = "quantize";
    let kv = KvFile::load(ctx.config.as_deref())?;
    kv.allow_only(&["seed"])?;
    let seed = resolve(ctx.seed, kv.get("seed")?, 0);
    let out = ctx.require_out(LABEL)?;

    let set = DescriptorSet::load(&a.input)?;
    let cb = Codebook::load(&a.codebook)?;
    let codes = pq_encode(set.data(), &cb)?;
    codes.save(out)?;

    let config = format!("seed={seed}\n");
    let mut manifest = RunManifest::new(LABEL, seed, config);
    manifest.add_input(&a.input)?;
    manifest.add_input(&a.codebook)?;
    manifest.add_output(out)?;
    manifest.write(&manifest_path(Some(out), LABEL))?;
    Ok(())
}

fn cmd_dequantize(ctx: &Ctx, a: &DequantizeArgs) -> CmdResult {
    const LABEL: &str = "dequantize";
    let kv = KvFile::load(ctx.config.as_deref())?;
    kv.allow_only(&["seed"])?;
    let seed = resolve(ctx.seed, kv.get("seed")?, 0);
    let out = ctx.require_out(LABEL)?;

    check_delta_needs_decoder(a.decoder.as_deref(), a.delta.as_deref())?;
    let codes = QuantizedIndex::load(&a.input)?;
    let cb = Codebook::load(&a.codebook)?;
    let decoder = load_decoder(a.decoder.as_deref(), a.delta.as_deref())?;

    let hard = pq_decode(&cb, &codes)?;
    let rows = match &decoder {
        None => hard,
        Some(w) => decoder_forward(&hard, w)?.output().clone(),
    };
    // Decoded rows get fresh sequential ids; the code index stores none.
    let ids: Vec<u64> = (0..rows.rows() as u64).collect();
    let set = DescriptorSet::new(rows, ids, false)?;
    set.save(out)?;

    let config = format!("seed={seed}\n");
    let mut manifest = RunManifest::new(LABEL, seed, config);
    manifest.add_input(&a.input)?;
    manifest.add_input(&a.codebook)?;
    if let Some(p) = &a.decoder {
        manifest.add_input(p)?;
    }
    if let Some(p) = &a.delta {
        manifest.add_input(p)?;
    }
    manifest.add_output(out)?;
    manifest.write(&manifest_path(Some(out), LABEL))?;
    Ok(())
}

fn cmd_compress_map(ctx: &Ctx, a: &CompressMapArgs) -> CmdResult {
    const LABEL: &str = "compress-map";
    let kv = KvFile::load(ctx.config.as_deref())?;
    kv.allow_only(&["alpha", "kernel", "sigma", "tau", "iters", "seed"])?;
    let alpha = resolve(a.alpha, kv.get("alpha")?, 0.25);
    let kernel_name =
        resolve(a.kernel.clone(), kv.get_raw("kernel").map(str::to_string), "rbf".to_string());
    let kernel = parse_kernel(&kernel_name)?;
    let sigma = a.sigma.or(kv.get("sigma")?);
    let tau = resolve(a.tau, kv.get("tau")?, 1.0);
    let iters = resolve(a.iters, kv.get("iters")?, DEFAULT_QP_ITERS);
    let seed = resolve(ctx.seed, kv.get("seed")?, 0);
    let out = ctx.require_out(LABEL)?;

    let scene = ScenePointSet::load(&a.scene)?;
    let (problem, used_sigma) =
        CompressionProblem::from_scene(&scene, kernel, sigma, tau, alpha)?;
    let solution = solve_map_qp(&problem, iters)?;
    let kept = select_points(&solution.v, scene.distinctiveness(), alpha)?;

    let mut text = String::new();
    text.push_str(&format!(
        "# kernel={} sigma={used_sigma} tau={tau} alpha={alpha}\n",
        kernel.as_str()
    ));
    text.push_str(&format!(
        "# iterations={} objective={}\n",
        solution.iterations, solution.objective
    ));
    text.push_str(&format!("# kept={} of {}\n", kept.len(), scene.len()));
    text.push_str("index\tweight\n");
    for &i in &kept {
        text.push_str(&format!("{i}\t{}\n", solution.v[i]));
    }
    std::fs::write(out, text).map_err(DpqError::from)?;

    let config = format!(
        "alpha={alpha}\nkernel={}\nsigma={used_sigma}\ntau={tau}\niters={iters}\nseed={seed}\n",
        kernel.as_str()
    );
    let mut manifest = RunManifest::new(LABEL, seed, config);
    manifest.add_input(&a.scene)?;
    manifest.add_output(out)?;
    manifest.write(&manifest_path(Some(out), LABEL))?;
    Ok(())
}

fn cmd_budget(ctx: &Ctx, a: &BudgetArgs) -> CmdResult {
    const LABEL: &str = "budget";
    let kv = KvFile::load(ctx.config.as_deref())?;
    kv.allow_only(&["bytes", "n", "m", "k", "seed"])?;
    let bytes = a
        .bytes
        .or(kv.get("bytes")?)
        .ok_or_else(|| CliError::Usage("--bytes is required for 'budget'".to_string()))?;
    let n = a
        .n
        .or(kv.get("n")?)
        .ok_or_else(|| CliError::Usage("--n is required for 'budget'".to_string()))?;
    let m = resolve(a.m, kv.get("m")?, 4);
    let k = resolve(a.k, kv.get("k")?, 256);
    let seed = resolve(ctx.seed, kv.get("seed")?, 0);

    let plan = plan_budget(n, m, k, bytes)?;
    let text = format!(
        "full_code_bytes={}\nalpha={}\nkept_points={}\n",
        plan.full_code_bytes, plan.alpha, plan.kept_points
    );
    emit(ctx.out.as_deref(), &text)?;

    let config = format!("bytes={bytes}\nn={n}\nm={m}\nk={k}\nseed={seed}\n");
    let mut manifest = RunManifest::new(LABEL, seed, config);
    if let Some(out) = ctx.out.as_deref() {
        manifest.add_output(out)?;
    }
    manifest.write(&manifest_path(ctx.out.as_deref(), LABEL))?;
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> CmdResult {
    const LABEL: &str = "eval";
    let kv = KvFile::load(ctx.config.as_deref())?;
    kv.allow_only(&["noise", "seed"])?;
    let noise = resolve(a.noise, kv.get("noise")?, 0.05);
    let seed = resolve(ctx.seed, kv.get("seed")?, 0);

    check_delta_needs_decoder(a.decoder.as_deref(), a.delta.as_deref())?;
    let set = DescriptorSet::load(&a.input)?;
    let cb = Codebook::load(&a.codebook)?;
    let decoder = load_decoder(a.decoder.as_deref(), a.delta.as_deref())?;

    let mut rows = vec![
        raw_bench(&set, noise, seed)?,
        asymmetric_bench(&set, noise, &cb, None, seed)?,
        symmetric_bench(&set, noise, &cb, None, seed)?,
    ];
    if let Some(w) = &decoder {
        rows.push(asymmetric_bench(&set, noise, &cb, Some(w), seed)?);
        rows.push(symmetric_bench(&set, noise, &cb, Some(w), seed)?);
    }

    let mut text = String::new();
    for r in &rows {
        text.push_str(&format!(
            "# overhead_bytes {}={}\n",
            r.method, r.overhead_bytes
        ));
    }
    text.push_str(
        "method\tbytes_per_vector\trecon_mean\trecall@1\trecall@5\tranking_preservation\n",
    );
    for r in &rows {
        text.push_str(&tsv_row(r));
    }
    emit(ctx.out.as_deref(), &text)?;

    let config = format!("noise={noise}\nseed={seed}\n");
    let mut manifest = RunManifest::new(LABEL, seed, config);
    manifest.add_input(&a.input)?;
    manifest.add_input(&a.codebook)?;
    if let Some(p) = &a.decoder {
        manifest.add_input(p)?;
    }
    if let Some(p) = &a.delta {
        manifest.add_input(p)?;
    }
    if let Some(out) = ctx.out.as_deref() {
        manifest.add_output(out)?;
    }
    manifest.write(&manifest_path(ctx.out.as_deref(), LABEL))?;
    Ok(())
}

fn tsv_row(r: &BenchResult) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\n",
        r.method, r.bytes_per_vector, r.recon_mean, r.recall1, r.recall5, r.ranking_preservation
    )
}

/// Write to the output file, or print to stdout when no --out was given.
fn emit(out: Option<&Path>, text: &str) -> CoreResult<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_kernel(name: &str) -> CoreResult<KernelKind> {
    match name {
        "rbf" => Ok(KernelKind::Rbf),
        "distance" => Ok(KernelKind::Distance),
        other => Err(DpqError::Config(format!(
            "unknown kernel '{other}' (expected rbf or distance)"
        ))),
    }
}

/// Flag-combination validation, checked before any file is touched.
fn check_delta_needs_decoder(
    decoder: Option<&Path>,
    delta: Option<&Path>,
) -> Result<(), CliError> {
    if decoder.is_none() && delta.is_some() {
        return Err(CliError::Usage("--delta requires --decoder".to_string()));
    }
    Ok(())
}

/// Load the optional decoder, applying the optional adapter on top.
fn load_decoder(
    decoder: Option<&Path>,
    delta: Option<&Path>,
) -> Result<Option<DecoderWeights>, CliError> {
    match (decoder, delta) {
        (None, Some(_)) => Err(CliError::Usage(
            "--delta requires --decoder".to_string(),
        )),
        (None, None) => Ok(None),
        (Some(dec), delta) => {
            let base = DecoderWeights::load(dec)?;
            match delta {
                None => Ok(Some(base)),
                Some(path) => {
                    let delta = LoraDelta::load(path)?;
                    Ok(Some(base.with_delta(&delta)?))
                }
            }
        }
    }
}

/// `stem.suffix` next to the stem path.
fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut name = stem.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    stem.with_file_name(name)
}
