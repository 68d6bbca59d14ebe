use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lora_compose::adapter::{factor_tensor_name, Factor};
use lora_compose::container::write_atomic;
use lora_compose::{
    apply_to_base, build_delta_set, compose_with, cosine_report, linear_fit, load_adapter_with, load_checkpoint,
    load_dataset, mean_nll_weighted, rank_certificate, save_checkpoint, simulate, AdapterBundle, ComposeOptions,
    ConfigOverrides, DeltaSet, Error, ErrorClass, Result, SimSpec, Weighting, DEFAULT_RANK_TOL,
};
use serde_json::{json, Value};

mod manifest;

use manifest::{to_json_bytes, RunManifest};

#[derive(Parser)]
#[command(name = "lora-compose", version, about = "Compose, compare and evaluate LoRA adapters")]
struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Seed for randomized commands.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "LORA_COMPOSE_THREADS")]
    threads: Option<usize>,

    /// Relative singular-value tolerance for numerical rank.
    #[arg(long, global = true, default_value_t = DEFAULT_RANK_TOL)]
    tol: f64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct Overrides {
    /// LoRA rank when neither a sidecar config nor file metadata declares it.
    #[arg(long)]
    rank: Option<usize>,
    /// LoRA alpha when neither a sidecar config nor file metadata declares it.
    #[arg(long)]
    alpha: Option<f64>,
}

impl From<Overrides> for ConfigOverrides {
    fn from(o: Overrides) -> Self {
        ConfigOverrides {
            rank: o.rank,
            alpha: o.alpha,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// List an adapter's layers with shapes and leading values.
    Inspect {
        adapter: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Add (`+file`) or subtract (`-file`) adapters onto a base checkpoint.
    Compose {
        /// Signed adapter paths, e.g. `+math.safetensors -finance.safetensors`.
        #[arg(required = true)]
        adapters: Vec<String>,
        #[arg(long)]
        base: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Compose even when adapters disagree on rank or alpha.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Layer-wise cosine similarity between two adapters' deltas.
    Similarity {
        a: PathBuf,
        b: PathBuf,
        /// Write the per-layer table as CSV.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Mean next-token NLL and perplexity of a checkpoint on a dataset.
    Eval {
        model: PathBuf,
        dataset: PathBuf,
        /// Signed adapters applied to the model before evaluation.
        #[arg(long = "adapter", allow_hyphen_values = true)]
        adapters: Vec<String>,
        /// Average per-sequence means instead of pooling tokens.
        #[arg(long)]
        seq_weighted: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Monte-Carlo orthogonality and rank-saturation study of random deltas.
    Simulate {
        #[arg(long, default_value_t = 768)]
        n: usize,
        #[arg(long, default_value_t = 2304)]
        m: usize,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        /// Number of deltas summed in the rank sweep.
        #[arg(long, default_value_t = 6)]
        j_max: usize,
        /// Directory for cosines.csv, sweep.csv and summary.json.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Least-squares line through `x,y` rows of a CSV file.
    Fit { points: PathBuf },
}

/// Marks a `-path` operand of `compose` so clap does not read it as a flag.
const NEGATED: &str = "\u{1}-";

/// After `compose`, any `-x…` token that is not one of its short flags is an
/// adapter to subtract. Attached short values (`-oFILE`) are therefore not
/// supported for `compose`; write `-o FILE`.
fn tag_negated(args: Vec<OsString>) -> Vec<OsString> {
    let mut in_compose = false;
    args.into_iter()
        .map(|arg| {
            let Some(s) = arg.to_str() else { return arg };
            if in_compose && s.len() > 2 && s.starts_with('-') && !s.starts_with("--") {
                return format!("{NEGATED}{}", &s[1..]).into();
            }
            in_compose |= s == "compose";
            arg
        })
        .collect()
}

/// Stdout writes that ignore a closed pipe (`lora-compose inspect … | head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(tag_negated(std::env::args_os().collect()));
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Input => 2,
        ErrorClass::Incompatible => 3,
        ErrorClass::Numeric => 4,
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Input("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if !(cli.tol > 0.0 && cli.tol < 1.0) {
        return Err(Error::Input(format!("--tol must lie in (0, 1), got {}", cli.tol)));
    }
    match &cli.command {
        Command::Inspect { adapter, overrides } => cmd_inspect(cli, adapter, *overrides),
        Command::Compose {
            adapters,
            base,
            out,
            force,
            overrides,
        } => cmd_compose(cli, adapters, base, out, *force, *overrides),
        Command::Similarity { a, b, out, overrides } => cmd_similarity(cli, a, b, out.as_deref(), *overrides),
        Command::Eval {
            model,
            dataset,
            adapters,
            seq_weighted,
            overrides,
        } => cmd_eval(cli, model, dataset, adapters, *seq_weighted, *overrides),
        Command::Simulate {
            n,
            m,
            rank,
            trials,
            std,
            j_max,
            out_dir,
        } => {
            let spec = SimSpec {
                n: *n,
                m: *m,
                r: *rank,
                trials: *trials,
                seed: cli.seed,
                init_std: *std,
            };
            cmd_simulate(cli, spec, *j_max, out_dir.as_deref())
        }
        Command::Fit { points } => cmd_fit(cli, points),
    }
}

fn print_json(value: &Value) {
    use std::io::Write as _;
    let _ = std::io::stdout().write_all(&to_json_bytes(value));
}

fn adapter_name(path: &Path) -> String {
    let stem = path.file_stem().unwrap_or(path.as_os_str()).to_string_lossy();
    if stem == "adapter_model" || path.is_dir() {
        let dir = if path.is_dir() { Some(path) } else { path.parent() };
        if let Some(name) = dir.and_then(Path::file_name) {
            return name.to_string_lossy().into_owned();
        }
    }
    stem.into_owned()
}

fn load(path: &Path, overrides: Overrides) -> Result<AdapterBundle> {
    load_adapter_with(path, &adapter_name(path), overrides.into())
}

/// `+path` → +1, `-path` → −1, bare path → +1.
fn parse_signed(arg: &str) -> Result<(f64, PathBuf)> {
    if let Some(rest) = arg.strip_prefix(NEGATED) {
        return parse_signed(&format!("-{rest}"));
    }
    let (sign, rest) = match arg.as_bytes().first() {
        Some(b'+') => (1.0, &arg[1..]),
        Some(b'-') => (-1.0, &arg[1..]),
        _ => (1.0, arg),
    };
    if rest.is_empty() {
        return Err(Error::Input(format!("`{arg}` names no adapter file")));
    }
    Ok((sign, PathBuf::from(rest)))
}

fn load_signed(args: &[String], overrides: Overrides, manifest: &mut RunManifest) -> Result<Vec<(DeltaSet, f64)>> {
    args.iter()
        .map(|arg| {
            let (sign, path) = parse_signed(arg)?;
            manifest.input(&path)?;
            Ok((build_delta_set(&load(&path, overrides)?)?, sign))
        })
        .collect()
}

/// The signed arguments as the user typed them.
fn display_signed(args: &[String]) -> Vec<String> {
    args.iter()
        .map(|a| match a.strip_prefix(NEGATED) {
            Some(rest) => format!("-{rest}"),
            None => a.clone(),
        })
        .collect()
}

fn record_overrides(manifest: &mut RunManifest, o: Overrides) {
    if let Some(r) = o.rank {
        manifest.param("rank", r);
    }
    if let Some(a) = o.alpha {
        manifest.param("alpha", a);
    }
}

fn cmd_inspect(cli: &Cli, path: &Path, overrides: Overrides) -> Result<()> {
    let bundle = load(path, overrides)?;
    let mut entries = Vec::new();
    for (key, pair) in &bundle.layers {
        for (factor, m) in [(Factor::A, &pair.a), (Factor::B, &pair.b)] {
            let preview: Vec<f64> = m.as_slice().iter().take(5).copied().collect();
            entries.push(json!({
                "layer": factor_tensor_name(key, factor),
                "block": key.block,
                "module": key.kind.as_str(),
                "factor": match factor { Factor::A => "A", Factor::B => "B" },
                "shape": [m.rows(), m.cols()],
                "first_values": preview,
            }));
        }
    }
    if cli.json {
        print_json(&Value::Array(entries));
        return Ok(());
    }
    out!(
        "{}: {} layers, r = {}, alpha = {}",
        bundle.name,
        bundle.layers.len(),
        bundle.config.rank,
        bundle.config.alpha
    );
    for e in &entries {
        let shape = &e["shape"];
        let values: Vec<String> = e["first_values"]
            .as_array()
            .expect("array")
            .iter()
            .map(|v| format!("{:.4}", v.as_f64().expect("number")))
            .collect();
        out!("{}", e["layer"].as_str().expect("string"));
        out!("  shape        ({}, {})", shape[0], shape[1]);
        out!("  first values [{}]", values.join(", "));
    }
    Ok(())
}

fn cmd_compose(
    cli: &Cli,
    args: &[String],
    base_path: &Path,
    out: &Path,
    force: bool,
    overrides: Overrides,
) -> Result<()> {
    let mut manifest = RunManifest::new("compose");
    let sets = load_signed(args, overrides, &mut manifest)?;
    manifest.input(base_path)?;
    manifest.param("adapters", display_signed(args));
    manifest.param("force", force);
    manifest.param("tol", cli.tol);
    record_overrides(&mut manifest, overrides);

    let refs: Vec<(&DeltaSet, f64)> = sets.iter().map(|(s, c)| (s, *c)).collect();
    let composed = compose_with(&refs, ComposeOptions { force })?;
    let base = load_checkpoint(base_path)?;
    let merged = apply_to_base(&base, &composed)?;

    let r = composed
        .scale
        .map(|s| s.rank)
        .or_else(|| sets.iter().filter_map(|(s, _)| s.scale.map(|b| b.rank)).max())
        .unwrap_or(1);
    let cert = rank_certificate(&composed, r, cli.tol)?;

    save_checkpoint(&merged, out)?;
    manifest.output(out);
    let manifest_path = manifest.write_beside(out)?;
    eprintln!("wrote {} and {}", out.display(), manifest_path.display());

    let violations: Vec<String> = cert
        .layers
        .iter()
        .filter(|l| !l.satisfied)
        .map(|l| format!("{} rank {} > bound {}", l.key, l.rank, l.bound))
        .collect();
    if cli.json {
        print_json(&json!({
            "sources": composed.source_names,
            "level": composed.level,
            "rank_certificate": cert,
            "manifest": manifest.to_value(),
        }));
    } else {
        let max_rank = cert.layers.iter().map(|l| l.rank).max().unwrap_or(0);
        out!(
            "composed {} into {}: {} layers, level {}, max numerical rank {}, certificate {}",
            composed.source_names.join(" "),
            out.display(),
            cert.layers.len(),
            composed.level,
            max_rank,
            if cert.satisfied { "satisfied" } else { "VIOLATED" }
        );
        for v in &violations {
            out!("  {v}");
        }
    }
    if !cert.satisfied {
        return Err(Error::Numeric(format!("rank certificate violated: {}", violations.join("; "))));
    }
    Ok(())
}

fn cmd_similarity(cli: &Cli, a: &Path, b: &Path, out: Option<&Path>, overrides: Overrides) -> Result<()> {
    let mut manifest = RunManifest::new("similarity");
    manifest.input(a)?;
    manifest.input(b)?;
    record_overrides(&mut manifest, overrides);
    let da = build_delta_set(&load(a, overrides)?)?;
    let db = build_delta_set(&load(b, overrides)?)?;
    let report = cosine_report(&da, &db)?;
    if let Some(out) = out {
        write_atomic(out, report.to_csv().as_bytes())?;
        manifest.output(out);
        manifest.write_beside(out)?;
    }
    if cli.json {
        print_json(&json!({
            "pair": report.pair,
            "layers": report.rows.len(),
            "rms": report.rms,
            "manifest": manifest.to_value(),
        }));
    } else {
        out!("{}", report.rms);
    }
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    model: &Path,
    dataset: &Path,
    adapters: &[String],
    seq_weighted: bool,
    overrides: Overrides,
) -> Result<()> {
    let mut manifest = RunManifest::new("eval");
    manifest.input(model)?;
    manifest.input(dataset)?;
    let sets = load_signed(adapters, overrides, &mut manifest)?;
    manifest.param("adapters", display_signed(adapters));
    manifest.param("weighting", if seq_weighted { "sequence" } else { "token" });
    record_overrides(&mut manifest, overrides);

    let mut weights = load_checkpoint(model)?;
    if !sets.is_empty() {
        let refs: Vec<(&DeltaSet, f64)> = sets.iter().map(|(s, c)| (s, *c)).collect();
        weights = apply_to_base(&weights, &compose_with(&refs, ComposeOptions::default())?)?;
    }
    let data = load_dataset(dataset)?;
    let weighting = if seq_weighted { Weighting::Sequence } else { Weighting::Token };
    let res = mean_nll_weighted(&weights, &data, weighting)?;
    if cli.json {
        print_json(&json!({
            "mean_nll": res.mean_nll,
            "perplexity": res.perplexity,
            "token_count": res.token_count,
            "manifest": manifest.to_value(),
        }));
    } else {
        out!(
            "mean_nll {} perplexity {} tokens {}",
            res.mean_nll, res.perplexity, res.token_count
        );
    }
    Ok(())
}

fn cmd_simulate(cli: &Cli, spec: SimSpec, j_max: usize, out_dir: Option<&Path>) -> Result<()> {
    spec.validate()?;
    let mut manifest = RunManifest::new("simulate");
    manifest.param("spec", spec);
    manifest.param("j_max", j_max);
    let res = simulate(&spec, j_max)?;
    let summary = |manifest: &RunManifest| {
        json!({
            "spec": res.spec,
            "mean_abs_cosine": res.mean_abs_cosine,
            "rms_cosine": res.rms_cosine,
            "max_abs_cosine": res.max_abs_cosine,
            "rank_saturation": res.rank_saturation,
            "manifest": manifest.to_value(),
        })
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let (cos, sweep, sum) = (dir.join("cosines.csv"), dir.join("sweep.csv"), dir.join("summary.json"));
        for p in [&cos, &sweep, &sum] {
            manifest.output(p);
        }
        write_atomic(&cos, res.cosines_csv().as_bytes())?;
        write_atomic(&sweep, res.sweep_csv().as_bytes())?;
        write_atomic(&sum, &to_json_bytes(&summary(&manifest)))?;
    }
    if cli.json {
        print_json(&summary(&manifest));
    } else {
        out!(
            "{}x{} r={} trials={}: mean|cos| {:.6} rms {:.6} max|cos| {:.6}",
            spec.n, spec.m, spec.r, spec.trials, res.mean_abs_cosine, res.rms_cosine, res.max_abs_cosine
        );
        for p in &res.rank_saturation {
            out!("  j={} rank {} bound {}", p.j, p.rank, p.bound);
        }
    }
    Ok(())
}

/// Rows of `x,y`; a non-numeric first line is taken as a header, `#` lines
/// and blank lines are skipped.
fn parse_points(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let parsed = match fields[..] {
            [x, y] => x.parse::<f64>().ok().zip(y.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => points.push(p),
            None if i == 0 => continue,
            None => {
                return Err(Error::Parse {
                    offset: start,
                    message: format!("line {}: expected `x,y`, got `{trimmed}`", i + 1),
                })
            }
        }
    }
    Ok(points)
}

fn cmd_fit(cli: &Cli, path: &Path) -> Result<()> {
    let mut manifest = RunManifest::new("fit");
    manifest.input(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let fit = linear_fit(&parse_points(&text)?)?;
    if cli.json {
        print_json(&json!({
            "slope": fit.slope,
            "intercept": fit.intercept,
            "points": fit.points,
            "manifest": manifest.to_value(),
        }));
    } else {
        out!("slope {} intercept {}", fit.slope, fit.intercept);
    }
    Ok(())
}
