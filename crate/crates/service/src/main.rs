use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vplab_core::segcore::SegModel;
use vplab_core::trainer::{compare_peft_variants, kshot_experiment, ExperimentConfig, FAMILIES, PAPER_KSHOT_SHOTS};
use vplab_service::{export_bytes, router, worker_loop, AppState, Store};

#[derive(Parser)]
#[command(name = "vplab", version, about = "Visual prompting lab: service and experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API and the job worker.
    Serve {
        #[arg(long, env = "VPLAB_PORT", default_value_t = 8731)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[command(flatten)]
        data: DataDir,
    },
    /// k-shot fine-tuning table on the synthetic families.
    Kshot {
        #[arg(long, value_delimiter = ',', default_values_t = PAPER_KSHOT_SHOTS.to_vec())]
        shots: Vec<usize>,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Compare each fine-tuning technique alone against the ensemble.
    ComparePeft {
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Write a project's newest delta checkpoint to a file.
    Export {
        #[arg(long)]
        project: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataDir,
    },
}

#[derive(Args)]
struct DataDir {
    #[arg(long = "data-dir", env = "VPLAB_DATA_DIR", default_value = "vplab-data")]
    path: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, value_delimiter = ',', default_values_t = FAMILIES.map(String::from).to_vec())]
    families: Vec<String>,
    /// TOML file with experiment settings (`[train]`, `[peft]`, `[matching]` tables).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving the CSV and JSON reports.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
        let mut cfg = match &self.config {
            Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn families(&self) -> Vec<&str> {
        self.families.iter().map(String::as_str).collect()
    }

    fn write(&self, stem: &str, csv: String, json: String) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join(format!("{stem}.csv")), csv)?;
        std::fs::write(self.out_dir.join(format!("{stem}.json")), json)?;
        eprintln!("wrote {stem}.csv and {stem}.json to {}", self.out_dir.display());
        Ok(())
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    match Cli::parse().command {
        Command::Serve { port, host, data } => {
            let state = AppState::open(&data.path, SegModel::tiny_fixture()?)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                tokio::spawn(worker_loop(state.clone()));
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!("vplab serving {} on http://{}", data.path.display(), listener.local_addr()?);
                axum::serve(listener, router(state)).await
            })?;
        }
        Command::Kshot { shots, exp } => {
            let model = SegModel::tiny_fixture()?;
            let report = kshot_experiment(&model, &exp.families(), &shots, &exp.load()?)?;
            print!("{}", report.render());
            exp.write("kshot", report.to_csv()?, report.to_json()?)?;
        }
        Command::ComparePeft { shots, exp } => {
            let model = SegModel::tiny_fixture()?;
            let report = compare_peft_variants(&model, &exp.families(), shots, &exp.load()?)?;
            print!("{}", report.render());
            exp.write("compare_peft", report.to_csv()?, report.to_json()?)?;
        }
        Command::Export { project, out, data } => {
            let store = Store::open(&data.path)?;
            let p = store.load(&project)?;
            let bytes = export_bytes(&store, &p)?;
            std::fs::write(&out, &bytes)?;
            eprintln!("wrote {} bytes to {}", bytes.len(), out.display());
        }
    }
    Ok(())
}
