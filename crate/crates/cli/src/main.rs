//! Batch verification and reporting for tensor-factorized attention.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error, 3 i/o
//! error. The default seed comes from `TUCKATTN_SEED` when set.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tuckattn_cli::io::{self, AnyWeights, IoError};
use tuckattn_cli::suites::Suite;
use tuckattn_core::accounting::{
    format_mb, kv_bytes_total, kv_cache_count, param_bytes_total, param_count, AttentionMethod,
    ModelDims, Phase,
};
use tuckattn_core::attention::{MhaWeights, SequenceInput};
use tuckattn_core::convert::{mha_to_gqa, mha_to_mla, mha_to_tucker, spectrum};
use tuckattn_core::grad::{toy_train, ToyInit, ToyTrainConfig};
use tuckattn_core::rng::SeededRng;
use tuckattn_core::rope::RopeConfig;
use tuckattn_core::tucker::{
    decode_step, kv_cache_bytes, tucker_forward, KvCache, TuckerAttentionParams,
};
use tuckattn_core::variants::{GqaWeights, MlaWeights};

#[derive(Parser)]
#[command(
    name = "tuckattn",
    about = "Tensor-factorized attention: verification, conversion, spectra, accounting, decoding, and toy training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit normalized singular spectra of the stacked attention tensors.
    Spectrum(SpectrumArgs),
    /// Convert dense attention weights into a compressed parametrization.
    Convert(ConvertArgs),
    /// Run the randomized oracle suites; nonzero exit on any failure.
    Verify(VerifyArgs),
    /// Report parameter and KV-cache footprints from the closed forms.
    Params(ParamsArgs),
    /// Decode token by token against the full forward pass.
    DecodeDemo(DecodeDemoArgs),
    /// Train the toy copy-previous-token regression and write the loss trace.
    TrainToy(TrainToyArgs),
    /// Generate random weights of a given kind into a container.
    Gen(GenArgs),
}

#[derive(Args)]
struct SpectrumArgs {
    /// Container stem (reads `<stem>.json` and `<stem>.bin`).
    #[arg(long)]
    weights: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConvertTarget {
    Gqa,
    Mla,
    Tucker,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceKind {
    Mha,
}

#[derive(Args)]
struct ConvertArgs {
    /// Source parametrization (dense layers only).
    #[arg(long, value_enum, default_value = "mha")]
    from: SourceKind,
    #[arg(long, value_enum)]
    to: ConvertTarget,
    /// Input container stem.
    #[arg(long)]
    weights: PathBuf,
    /// Output container stem.
    #[arg(long)]
    out: PathBuf,
    /// KV head count for grouped conversion.
    #[arg(long)]
    n_kv: Option<usize>,
    /// Query latent dimension for latent conversion.
    #[arg(long)]
    d_cq: Option<usize>,
    /// Key latent dimension for latent conversion.
    #[arg(long)]
    d_ck: Option<usize>,
    /// Pre-softmax ranks r1,r2,r3 for factorized conversion.
    #[arg(long, value_parser = parse_ranks)]
    ranks: Option<(usize, usize, usize)>,
    /// Post-softmax ranks (defaults to --ranks).
    #[arg(long, value_parser = parse_ranks)]
    ranks_post: Option<(usize, usize, usize)>,
    /// Share one key/value factor (halves the cache).
    #[arg(long)]
    shared_kv: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite to run; defaults to all of them.
    #[arg(long)]
    suite: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    DenseTensor,
    Mha,
    Mqa,
    Gqa,
    MlaSeparated,
    MlaShared,
    Tucker,
    TuckerShared,
}

impl MethodArg {
    fn method(self) -> AttentionMethod {
        match self {
            MethodArg::DenseTensor => AttentionMethod::DenseTensor,
            MethodArg::Mha => AttentionMethod::Mha,
            MethodArg::Mqa => AttentionMethod::Mqa,
            MethodArg::Gqa => AttentionMethod::Gqa,
            MethodArg::MlaSeparated => AttentionMethod::MlaSeparated,
            MethodArg::MlaShared => AttentionMethod::MlaShared,
            MethodArg::Tucker => AttentionMethod::TuckerSeparated,
            MethodArg::TuckerShared => AttentionMethod::TuckerShared,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    Bf16,
    F32,
    F64,
}

impl DtypeArg {
    fn bytes(self) -> u64 {
        match self {
            DtypeArg::Bf16 => 2,
            DtypeArg::F32 => 4,
            DtypeArg::F64 => 8,
        }
    }
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Dimension preset; `gpt2` = 12 heads of width 64, d_model 768,
    /// context 1024, 12 layers.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    d_model: Option<u64>,
    #[arg(long)]
    n_heads: Option<u64>,
    #[arg(long)]
    d_head: Option<u64>,
    /// Cached context length.
    #[arg(long)]
    tokens: Option<u64>,
    #[arg(long)]
    layers: Option<u64>,
    #[arg(long)]
    n_kv: Option<u64>,
    /// Latent dimension of the latent methods.
    #[arg(long)]
    d_c: Option<u64>,
    /// Factorization ranks r1,r2,r3.
    #[arg(long, value_parser = parse_ranks)]
    ranks: Option<(usize, usize, usize)>,
    #[arg(long, value_enum, default_value = "bf16")]
    dtype: DtypeArg,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RopeArg {
    None,
    Latent,
}

#[derive(Args)]
struct DecodeDemoArgs {
    /// Factorized weight container stem.
    #[arg(long)]
    weights: PathBuf,
    /// Prefix length to decode.
    #[arg(long, default_value_t = 32)]
    tokens: usize,
    #[arg(long, value_enum, default_value = "none")]
    rope: RopeArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Value width used for the cache-size report.
    #[arg(long, value_enum, default_value = "bf16")]
    dtype: DtypeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Mha,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, value_parser = parse_ranks, default_value = "4,16,16")]
    ranks: (usize, usize, usize),
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long)]
    shared_kv: bool,
    #[arg(long, value_enum, default_value = "random")]
    init: InitArg,
    /// Loss trace CSV (step,loss).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Mha,
    Gqa,
    Mla,
    Tucker,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: GenKind,
    /// Output container stem.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_kv: usize,
    #[arg(long, default_value_t = 8)]
    d_cq: usize,
    #[arg(long, default_value_t = 8)]
    d_ck: usize,
    #[arg(long, value_parser = parse_ranks, default_value = "2,8,8")]
    ranks: (usize, usize, usize),
    #[arg(long)]
    shared_kv: bool,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_ranks(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected r1,r2,r3, got {s:?}"));
    }
    let parse = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad rank {p:?}: {e}"))
    };
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

/// Failures carrying their process exit code.
enum CliError {
    /// A check ran and failed (exit 1).
    Verification(String),
    /// The request itself was unusable (exit 2).
    Usage(String),
    /// File or container trouble (exit 3).
    Io(IoError),
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e)
    }
}

impl From<tuckattn_core::Error> for CliError {
    fn from(e: tuckattn_core::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(IoError::Io(e))
    }
}

fn default_seed(explicit: Option<u64>) -> u64 {
    explicit
        .or_else(|| {
            std::env::var("TUCKATTN_SEED")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Io(e)) => {
            eprintln!("i/o error: {e}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Spectrum(args) => cmd_spectrum(args),
        Command::Convert(args) => cmd_convert(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Params(args) => cmd_params(args),
        Command::DecodeDemo(args) => cmd_decode_demo(args),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Gen(args) => cmd_gen(args),
    }
}

fn cmd_spectrum(args: SpectrumArgs) -> Result<(), CliError> {
    let weights = io::load_weights(&args.weights)?;
    let pair = weights.lift();
    let report = spectrum(&pair).map_err(CliError::from)?;
    let mut csv = String::from("tensor,mode,index,value\n");
    let mode_names_pre = ["head", "query", "key"];
    let mode_names_post = ["head", "output", "value"];
    for (mode, values) in report.pre.iter().enumerate() {
        for (i, v) in values.iter().enumerate() {
            writeln!(csv, "pre,{},{},{}", mode_names_pre[mode], i, v).unwrap();
        }
    }
    for (mode, values) in report.post.iter().enumerate() {
        for (i, v) in values.iter().enumerate() {
            writeln!(csv, "post,{},{},{}", mode_names_post[mode], i, v).unwrap();
        }
    }
    std::fs::write(&args.out, csv)?;
    println!(
        "wrote spectra of {} weights ({} heads) to {}",
        weights.kind(),
        pair.n_heads(),
        args.out.display()
    );
    Ok(())
}

fn cmd_convert(args: ConvertArgs) -> Result<(), CliError> {
    let SourceKind::Mha = args.from;
    let source = match io::load_weights(&args.weights)? {
        AnyWeights::Mha(w) => w,
        other => {
            return Err(CliError::Usage(format!(
                "conversion starts from dense weights, found {}",
                other.kind()
            )))
        }
    };
    let pair = tuckattn_core::attention::stack_attention_tensors(&source);
    let converted = match args.to {
        ConvertTarget::Gqa => {
            let n_kv = args.n_kv.ok_or_else(|| {
                CliError::Usage("--n-kv is required for grouped conversion".into())
            })?;
            let g = mha_to_gqa(&source, n_kv).map_err(CliError::from)?;
            // Dropped-block error: per-head deviation between the original
            // block and the block its group kept.
            let mut err: f64 = 0.0;
            let induced = g.induced_mha();
            for i in 0..source.n_heads {
                err = err.max(induced.wk_head(i).sub(&source.wk_head(i)).frobenius_norm());
                err = err.max(induced.wv_head(i).sub(&source.wv_head(i)).frobenius_norm());
            }
            println!(
                "kept {} of {} kv heads; worst dropped-block error {err}",
                n_kv, source.n_heads
            );
            AnyWeights::Gqa(g)
        }
        ConvertTarget::Mla => {
            let d_cq = args.d_cq.ok_or_else(|| {
                CliError::Usage("--d-cq is required for latent conversion".into())
            })?;
            let d_ck = args.d_ck.ok_or_else(|| {
                CliError::Usage("--d-ck is required for latent conversion".into())
            })?;
            let m = mha_to_mla(&source, d_cq, d_ck, args.shared_kv).map_err(CliError::from)?;
            let induced = m.induced_mha();
            println!(
                "query error {} | key error {} | value error {}",
                induced.wq.rel_frobenius_diff(&source.wq),
                induced.wk.rel_frobenius_diff(&source.wk),
                induced.wv.rel_frobenius_diff(&source.wv),
            );
            AnyWeights::Mla(m)
        }
        ConvertTarget::Tucker => {
            let ranks = args.ranks.ok_or_else(|| {
                CliError::Usage("--ranks is required for factorized conversion".into())
            })?;
            let ranks_post = args.ranks_post.unwrap_or(ranks);
            let p = mha_to_tucker(&source, ranks, ranks_post, args.shared_kv)
                .map_err(CliError::from)?;
            let re = tuckattn_core::tucker::materialize(&p);
            println!(
                "pre-softmax tensor error {} | post-softmax tensor error {}",
                re.w_pre.rel_frobenius_diff(&pair.w_pre),
                re.w_post.rel_frobenius_diff(&pair.w_post),
            );
            AnyWeights::Tucker(p)
        }
    };
    io::save_weights(&converted, &args.out)?;
    println!(
        "wrote {} container to {}",
        converted.kind(),
        args.out.display()
    );
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), CliError> {
    let seed = default_seed(args.seed);
    let suites: Vec<Suite> = match &args.suite {
        None => Suite::ALL.to_vec(),
        Some(name) if name == "all" => Suite::ALL.to_vec(),
        Some(name) => vec![Suite::parse(name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown suite {name:?}; expected one of all, equivalence, ranks, rope, decode, streaming, grad"
            ))
        })?],
    };
    let mut failures = 0usize;
    for suite in suites {
        for check in suite.run(seed) {
            let status = if check.passed() { "pass" } else { "FAIL" };
            println!(
                "[{}] {:<55} max error {:>12.3e} (tol {:.0e}) {}",
                suite.name(),
                check.name,
                check.max_err,
                check.tol,
                status
            );
            if !check.passed() {
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(CliError::Verification(format!(
            "{failures} check(s) failed"
        )));
    }
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> Result<(), CliError> {
    let mut dims = match args.dims.as_deref() {
        Some("gpt2") | None => ModelDims::gpt2(),
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown dims preset {other:?} (available: gpt2)"
            )))
        }
    };
    if let Some(v) = args.d_model {
        dims.d_model = v;
    }
    if let Some(v) = args.n_heads {
        dims.n_heads = v;
    }
    if let Some(v) = args.d_head {
        dims.d_head = v;
    } else if args.d_model.is_some() || args.n_heads.is_some() {
        if dims.n_heads == 0 || dims.d_model % dims.n_heads != 0 {
            return Err(CliError::Usage(
                "d_model must be divisible by n_heads (or pass --d-head)".into(),
            ));
        }
        dims.d_head = dims.d_model / dims.n_heads;
    }
    if let Some(v) = args.tokens {
        dims.n_ctx = v;
    }
    if let Some(v) = args.layers {
        dims.layers = v;
    }
    if let Some(v) = args.n_kv {
        dims.n_kv = v;
    }
    if let Some(v) = args.d_c {
        dims.d_c = v;
    }
    if let Some((r1, r2, r3)) = args.ranks {
        dims = dims.with_ranks(r1 as u64, r2 as u64, r3 as u64);
    }
    dims.bytes_per_value = args.dtype.bytes();

    let method = args.method.method();
    let report = |phase: Phase| -> Result<(u64, u64), CliError> {
        Ok((
            param_count(method, &dims, phase).map_err(CliError::from)?,
            param_bytes_total(method, &dims, phase).map_err(CliError::from)?,
        ))
    };
    let (train_layer, train_total) = report(Phase::Train)?;
    let (inf_layer, inf_total) = report(Phase::Inference)?;
    let kv_layer = kv_cache_count(method, &dims).map_err(CliError::from)?;
    let kv_total = kv_bytes_total(method, &dims).map_err(CliError::from)?;

    println!(
        "method {} | d_model {} heads {} layers {} context {} ({} B/value)",
        method.name(),
        dims.d_model,
        dims.n_heads,
        dims.layers,
        dims.n_ctx,
        dims.bytes_per_value
    );
    println!(
        "{:<26} {:>16} {:>16} {:>10}",
        "quantity", "per layer", "total bytes", "MB"
    );
    println!(
        "{:<26} {:>16} {:>16} {:>10}",
        "params (train)",
        train_layer,
        train_total,
        format_mb(train_total)
    );
    println!(
        "{:<26} {:>16} {:>16} {:>10}",
        "params (inference)",
        inf_layer,
        inf_total,
        format_mb(inf_total)
    );
    println!(
        "{:<26} {:>16} {:>16} {:>10}",
        "kv cache",
        kv_layer,
        kv_total,
        format_mb(kv_total)
    );

    if let Some(csv_path) = args.csv {
        let mut csv = String::from("method,quantity,per_layer,total_bytes,mb\n");
        writeln!(
            csv,
            "{},params_train,{},{},{}",
            method.name(),
            train_layer,
            train_total,
            format_mb(train_total)
        )
        .unwrap();
        writeln!(
            csv,
            "{},params_inference,{},{},{}",
            method.name(),
            inf_layer,
            inf_total,
            format_mb(inf_total)
        )
        .unwrap();
        writeln!(
            csv,
            "{},kv_cache,{},{},{}",
            method.name(),
            kv_layer,
            kv_total,
            format_mb(kv_total)
        )
        .unwrap();
        std::fs::write(&csv_path, csv)?;
        println!("wrote report to {}", csv_path.display());
    }
    Ok(())
}

fn cmd_decode_demo(args: DecodeDemoArgs) -> Result<(), CliError> {
    let params = match io::load_weights(&args.weights)? {
        AnyWeights::Tucker(p) => p,
        other => {
            return Err(CliError::Usage(format!(
                "decoding needs a factorized container, found {}",
                other.kind()
            )))
        }
    };
    if args.tokens == 0 {
        return Err(CliError::Usage("--tokens must be positive".into()));
    }
    let cfg = match args.rope {
        RopeArg::None => None,
        RopeArg::Latent => {
            Some(RopeConfig::with_default_base(params.ranks_pre().2).map_err(CliError::from)?)
        }
    };
    let seed = default_seed(args.seed);
    let mut rng = SeededRng::new(seed);
    let x = rng.normal_matrix(args.tokens, params.d_model());
    let input = SequenceInput::new(x.clone(), true).map_err(CliError::from)?;
    let full = tucker_forward(&params, &input, cfg.as_ref()).map_err(CliError::from)?;
    let mut cache = KvCache::new(&params);
    let mut worst = 0.0f64;
    for t in 0..args.tokens {
        let row =
            decode_step(&params, &mut cache, x.row(t), t, cfg.as_ref()).map_err(CliError::from)?;
        for (a, b) in row.iter().zip(full.row(t)) {
            worst = worst.max((a - b).abs());
        }
    }
    let bytes = kv_cache_bytes(&params, args.tokens as u64, args.dtype.bytes());
    println!(
        "decoded {} tokens (seed {seed}, {} kv, rotation {}): cache {} values = {} bytes per layer, max deviation vs full forward {worst:.3e}",
        args.tokens,
        if params.shared_kv() { "shared" } else { "separated" },
        match args.rope {
            RopeArg::None => "off",
            RopeArg::Latent => "latent",
        },
        bytes / args.dtype.bytes(),
        bytes,
    );
    if worst > 1e-10 {
        return Err(CliError::Verification(format!(
            "decode deviated from the full forward by {worst:.3e} (tol 1e-10)"
        )));
    }
    Ok(())
}

fn cmd_train_toy(args: TrainToyArgs) -> Result<(), CliError> {
    let config = ToyTrainConfig {
        n_heads: args.n_heads,
        d_model: args.d_model,
        ranks: args.ranks,
        shared_kv: args.shared_kv,
        n_tokens: args.tokens,
        steps: args.steps,
        learning_rate: args.lr,
        seed: default_seed(args.seed),
        init: match args.init {
            InitArg::Random => ToyInit::Random,
            InitArg::Mha => ToyInit::FromMha,
        },
    };
    let outcome = toy_train(&config).map_err(CliError::from)?;
    let mut csv = String::from("step,loss\n");
    for (step, loss) in outcome.losses.iter().enumerate() {
        writeln!(csv, "{step},{loss}").unwrap();
    }
    std::fs::write(&args.out, csv)?;
    println!(
        "trained {} steps (seed {}): loss {} -> {}, trace in {}",
        outcome.losses.len(),
        config.seed,
        outcome.losses.first().unwrap(),
        outcome.final_loss(),
        args.out.display()
    );
    if outcome.diverged {
        return Err(CliError::Verification(
            "training diverged to a non-finite loss".into(),
        ));
    }
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let seed = default_seed(args.seed);
    let mut rng = SeededRng::new(seed);
    let weights = match args.kind {
        GenKind::Mha => AnyWeights::Mha(
            MhaWeights::random(args.n_heads, args.d_model, &mut rng).map_err(CliError::from)?,
        ),
        GenKind::Gqa => AnyWeights::Gqa(
            GqaWeights::random(args.n_heads, args.n_kv, args.d_model, &mut rng)
                .map_err(CliError::from)?,
        ),
        GenKind::Mla => AnyWeights::Mla(
            MlaWeights::random(
                args.n_heads,
                args.d_model,
                args.d_cq,
                args.d_ck,
                args.shared_kv,
                &mut rng,
            )
            .map_err(CliError::from)?,
        ),
        GenKind::Tucker => {
            if args.n_heads == 0 || args.d_model % args.n_heads != 0 {
                return Err(CliError::Usage(
                    "d_model must be divisible by n_heads".into(),
                ));
            }
            AnyWeights::Tucker(
                TuckerAttentionParams::random_init(
                    args.n_heads,
                    args.d_model,
                    args.ranks,
                    args.ranks,
                    args.shared_kv,
                    (args.d_model / args.n_heads) as f64,
                    &mut rng,
                )
                .map_err(CliError::from)?,
            )
        }
    };
    io::save_weights(&weights, &args.out)?;
    println!(
        "wrote random {} weights (seed {seed}) to {}",
        weights.kind(),
        args.out.display()
    );
    Ok(())
}
