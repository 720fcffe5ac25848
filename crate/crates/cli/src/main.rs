use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cellcode::codedb::DbMode;
use cellcode::GeoPoint;
use cellcode_cli::commands::{self, Context, QueryInput, Suite};
use cellcode_cli::error::CliError;

#[derive(Parser)]
#[command(name = "cellcode", version, about = "Cell-code geolocalization pipeline")]
struct Cli {
    /// Configuration file of `key = value` lines; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for inputs and outputs; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and the train/test views.
    GenWorld,
    /// Train encoders and prototypes.
    Train,
    /// Estimate the hybrid scale from training views.
    Calibrate,
    /// Build the ground, aerial, prototype and hybrid databases.
    BuildDb,
    /// Retrieve the top-K entries for one query.
    Query {
        #[arg(long, default_value = "hybrid")]
        mode: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Comma-separated query embedding.
        #[arg(long, conflicts_with_all = ["lat", "lon"])]
        embedding: Option<String>,
        #[arg(long, allow_hyphen_values = true, requires = "lon")]
        lat: Option<f64>,
        #[arg(long, allow_hyphen_values = true, requires = "lat")]
        lon: Option<f64>,
        /// Heading in degrees clockwise from north.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        heading: f64,
        /// Horizontal field of view in degrees.
        #[arg(long, default_value_t = 60.0)]
        fov: f64,
    },
    /// Evaluate recall of every database on the test views.
    Eval,
    /// Retrain and evaluate ablation arms.
    Ablate {
        /// loss-edges, interp, kappa, density, granularity or all.
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Project prototypes onto their three leading principal components.
    ExportPca,
}

fn query_input(
    embedding: Option<String>,
    lat: Option<f64>,
    lon: Option<f64>,
    heading: f64,
    fov: f64,
) -> Result<QueryInput, CliError> {
    if let Some(text) = embedding {
        let v = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("--embedding: {e}")))?;
        return Ok(QueryInput::Embedding(v));
    }
    let (Some(lat), Some(lon)) = (lat, lon) else {
        return Err(CliError::Config("query needs --embedding or --lat and --lon".into()));
    };
    let location = GeoPoint::from_degrees(lat, lon).map_err(CliError::from)?;
    Ok(QueryInput::Pose {
        location,
        heading: heading.to_radians(),
        fov: fov.to_radians(),
    })
}

fn run(cli: Cli) -> Result<String, CliError> {
    let config = commands::read_config(cli.config.as_deref(), cli.seed, cli.out.as_deref())?;
    let ctx = Context::open(config)?;
    match cli.command {
        Command::GenWorld => commands::gen_world(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::Calibrate => commands::calibrate(&ctx),
        Command::BuildDb => commands::build_db(&ctx),
        Command::Query {
            mode,
            k,
            embedding,
            lat,
            lon,
            heading,
            fov,
        } => {
            let mode = DbMode::parse(&mode).ok_or_else(|| CliError::Config(format!("unknown mode {mode:?}")))?;
            if k == 0 {
                return Err(CliError::Config("--k must be at least 1".into()));
            }
            let input = query_input(embedding, lat, lon, heading, fov)?;
            commands::query(&ctx, mode, k, &input)
        }
        Command::Eval => commands::eval(&ctx),
        Command::Ablate { suite } => {
            let suites = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![Suite::parse(&suite).ok_or_else(|| CliError::Config(format!("unknown suite {suite:?}")))?]
            };
            commands::ablate(&ctx, &suites)
        }
        Command::ExportPca => commands::export_pca(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(text) => {
            let text = text.trim_end();
            if !text.is_empty() {
                println!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("cellcode: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
