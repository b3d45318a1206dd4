use std::alloc::{GlobalAlloc, Layout, System};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use clap::{Parser, ValueEnum};

use u8k::analysis::engine::AnalysisSettings;
use u8k::analysis::DEFAULT_WORKLIST_BUDGET;
use u8k::bench::{bench_sweep, BenchMode, MemProbe};
use u8k::domains::shape::ExitPoint;
use u8k::domains::value::DEFAULT_VSET_LIMIT;
use u8k::machine::image::MachineImage;
use u8k::report::{self, Format};
use u8k::verify::{verify_bootdiff, verify_in_context, verify_parameterized, Verification};

/// Verify a u8k kernel image: absence of runtime errors (arte) and of
/// privilege escalation (ape), in-context or against type annotations.
#[derive(Parser)]
#[command(
    name = "u8k-verify",
    version,
    after_help = "Exit status: 0 both properties proved, 2 a property is not proved, \
                  1 usage or input error.\nRandomized self-check suites in the test \
                  harness honor U8K_SEED (default 0xC0DE)."
)]
struct Args {
    /// Kernel image (required unless --bench)
    kernel: Option<PathBuf>,
    /// User image (required unless --bench)
    user: Option<PathBuf>,
    /// Analysis mode
    #[arg(long, value_enum, default_value_t = Mode::Incontext)]
    mode: Mode,
    /// Annotation file (.u8ka); required by the param modes
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Boot exitpoint for param-bootdiff: a kernel symbol or 0xNN
    #[arg(long)]
    exitpoint: Option<String>,
    /// Worklist pop budget before the analysis gives up
    #[arg(long, default_value_t = DEFAULT_WORKLIST_BUDGET)]
    budget_worklist: u64,
    /// Value-set size limit of the numeric domain
    #[arg(long, default_value_t = DEFAULT_VSET_LIMIT)]
    vset_k: usize,
    /// Report format
    #[arg(long, value_enum, default_value_t = ReportArg::Text)]
    report: ReportArg,
    /// Write the kernel-exit invariant to this path
    #[arg(long)]
    emit_invariant: Option<PathBuf>,
    /// Benchmark sweep over these thread counts instead of verifying
    #[arg(long, value_delimiter = ',')]
    bench: Option<Vec<usize>>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Incontext,
    Param,
    ParamBootdiff,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Incontext => "incontext",
            Mode::Param => "param",
            Mode::ParamBootdiff => "param-bootdiff",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportArg {
    Text,
    Json,
}

impl From<ReportArg> for Format {
    fn from(r: ReportArg) -> Format {
        match r {
            ReportArg::Text => Format::Text,
            ReportArg::Json => Format::Json,
        }
    }
}

/// Allocator wrapper that tracks the live total and its peak, for the
/// benchmark's memory column.
struct Counting;

static CURRENT: AtomicU64 = AtomicU64::new(0);
static PEAK: AtomicU64 = AtomicU64::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size() as u64, Ordering::Relaxed)
                + layout.size() as u64;
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size() as u64, Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn probe() -> MemProbe {
    MemProbe {
        reset: || PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed),
        peak: || PEAK.load(Ordering::Relaxed),
    }
}

fn load_image(path: &PathBuf) -> Result<MachineImage, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    MachineImage::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_exitpoint(s: &str) -> Result<ExitPoint, String> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        let a = u8::from_str_radix(hex, 16).map_err(|_| format!("bad exitpoint address `{s}`"))?;
        Ok(ExitPoint::Addr(a))
    } else {
        Ok(ExitPoint::Symbol(s.to_string()))
    }
}

fn run(args: &Args) -> Result<ExitCode, String> {
    if let Some(ns) = &args.bench {
        if ns.is_empty() {
            return Err("--bench needs at least one thread count".into());
        }
        let mode = match args.mode {
            Mode::Incontext => BenchMode::InContext,
            Mode::Param => BenchMode::Parameterized,
            Mode::ParamBootdiff => {
                return Err("--bench supports the incontext and param modes".into())
            }
        };
        let rows = bench_sweep(ns, mode, Some(probe()));
        print!("{}", report::bench(args.report.into(), mode.name(), &rows));
        return Ok(ExitCode::SUCCESS);
    }

    let (Some(kernel_path), Some(user_path)) = (&args.kernel, &args.user) else {
        return Err("kernel and user image paths are required (or use --bench)".into());
    };
    let kernel = load_image(kernel_path)?;
    let user = load_image(user_path)?;
    let settings = AnalysisSettings {
        k: args.vset_k,
        budget: args.budget_worklist,
        ..AnalysisSettings::default()
    };

    let annotations = match (args.mode, &args.annotations) {
        (Mode::Incontext, Some(_)) => {
            return Err("--annotations is meaningless in in-context mode".into())
        }
        (Mode::Incontext, None) => None,
        (_, None) => return Err(format!("--mode {} needs --annotations", args.mode.name())),
        (_, Some(p)) => {
            Some(std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)
        }
    };
    let exitpoint = args
        .exitpoint
        .as_deref()
        .map(parse_exitpoint)
        .transpose()?;

    let start = Instant::now();
    let v: Verification = match args.mode {
        Mode::Incontext => verify_in_context(&kernel, &user, &settings),
        Mode::Param => verify_parameterized(&kernel, &user, annotations.as_deref().unwrap(), &settings),
        Mode::ParamBootdiff => verify_bootdiff(
            &kernel,
            &user,
            annotations.as_deref().unwrap(),
            exitpoint,
            &settings,
        ),
    }
    .map_err(|e| e.to_string())?;
    let millis = start.elapsed().as_secs_f64() * 1e3;

    let invariant_path = match &args.emit_invariant {
        None => None,
        Some(p) => {
            std::fs::write(p, &v.invariant).map_err(|e| format!("{}: {e}", p.display()))?;
            Some(p.display().to_string())
        }
    };
    print!(
        "{}",
        report::verification(
            args.report.into(),
            args.mode.name(),
            &kernel_path.display().to_string(),
            &user_path.display().to_string(),
            &v,
            millis,
            invariant_path.as_deref(),
        )
    );
    if v.arte.proved() && v.ape.proved() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("u8k-verify: {e}");
            ExitCode::FAILURE
        }
    }
}
