//! Command-line front end. `--json` prints the same bodies the HTTP API
//! returns.

use std::ffi::OsString;
use std::net::IpAddr;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use netcase_core::case::{Case, ConfigRef, Engine};
use netcase_core::detect::DetectionReport;
use netcase_core::ingest::{ImportConfig, ImportKind, ImportRecord};
use netcase_core::store::{AggregationSpec, CleanupScope, QueryFilter};
use netcase_core::synth::replica::{Replica, ReplicaConfig};
use serde::Serialize;

use crate::api::{self, ServeConfig};
use crate::error::ServiceError;
use crate::ops::{self, AggregateRequest, HistogramParams, PortScanParams, QueryRequest, WatchRequest};

/// `println!` that stops quietly when stdout is closed, e.g. piped to `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "netcase", version, about = "Forensic cases over packet captures and flow records")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Directory holding all cases.
    #[arg(long, global = true, env = "NETCASE_DATA_ROOT", default_value = "netcase-data")]
    pub data_root: PathBuf,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an empty case.
    Create { case: String },
    /// List case ids.
    List,
    /// Show one case, or every case.
    Status { case: Option<String> },
    /// Delete a case and all its data.
    Destroy { case: String },
    /// Accept imports and watch ticks again.
    Start { case: String },
    /// Wait for the running import, then refuse new ones.
    Stop { case: String },
    /// Write a case archive.
    Backup {
        case: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unpack an archive as a new case.
    Restore { archive: PathBuf, case: String },
    /// Import captures, CSV or JSON files, directories or archives.
    Import {
        case: String,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Save a named import configuration.
    Config {
        case: String,
        config_id: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// List imports, or show one.
    History { case: String, import_id: Option<String> },
    #[command(subcommand)]
    Detect(Detect),
    #[command(subcommand)]
    Watch(Watch),
    /// Flow documents matching a filter.
    Query {
        case: String,
        /// Filter JSON, or @file.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 100)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        offset: usize,
    },
    /// Run a nested terms aggregation.
    Aggregate {
        case: String,
        /// Aggregation JSON, or @file.
        #[arg(long)]
        spec: String,
        /// Filter JSON, or @file.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        max_buckets: Option<u64>,
    },
    /// Delete indexed documents, all or one day.
    Cleanup {
        case: String,
        #[arg(long)]
        day: Option<NaiveDate>,
    },
    /// Write the synthetic two-scanner captures and their ground truth.
    Generate {
        dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "NETCASE_BIND", default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, env = "NETCASE_PORT", default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Saved configuration id; with other options, the id to save under.
    #[arg(long = "config")]
    pub config_id: Option<String>,
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    #[arg(long)]
    pub no_repair: bool,
    /// `ip<TAB>name` table for endpoint labels.
    #[arg(long)]
    pub enrich: Option<PathBuf>,
    /// Partition day for CSV and JSON rows.
    #[arg(long)]
    pub day: Option<NaiveDate>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Kind {
    Auto,
    Pcap,
    Csv,
    Json,
}

impl ConfigArgs {
    fn customized(&self) -> bool {
        self.kind.is_some() || self.no_repair || self.enrich.is_some() || self.day.is_some()
    }

    fn build(&self, id: &str) -> ImportConfig {
        let mut c = ImportConfig::new(id);
        c.source_kind = match self.kind.unwrap_or(Kind::Auto) {
            Kind::Auto => ImportKind::Auto,
            Kind::Pcap => ImportKind::Pcap,
            Kind::Csv => ImportKind::Csv,
            Kind::Json => ImportKind::Json,
        };
        c.repair_enabled = !self.no_repair;
        c.enrichment_table = self.enrich.clone();
        c.target_day_override = self.day;
        c
    }

    fn to_ref(&self) -> ConfigRef {
        match &self.config_id {
            Some(id) if !self.customized() => ConfigRef::Saved(id.clone()),
            id => ConfigRef::Inline(self.build(id.as_deref().unwrap_or("default"))),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Detect {
    /// Senders with many unique destination ports on one day.
    Portscan {
        case: String,
        #[arg(long)]
        day: NaiveDate,
        #[arg(long)]
        pair_min: Option<u64>,
        #[arg(long)]
        total_min: Option<u64>,
        #[arg(long)]
        max_buckets: Option<u64>,
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Senders binned by total unique ports.
    Histogram {
        case: String,
        #[arg(long)]
        day: NaiveDate,
        #[arg(long)]
        pair_floor: Option<u64>,
        #[arg(long)]
        max_buckets: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum Watch {
    /// Register or update a watched directory.
    Add {
        case: String,
        watch_id: String,
        directory: PathBuf,
        /// Saved configuration id applied to new files.
        #[arg(long = "config")]
        config_id: String,
        /// Seconds between scans.
        #[arg(long)]
        interval: Option<u64>,
        #[arg(long)]
        disabled: bool,
    },
    Remove { case: String, watch_id: String },
    /// Scan once now.
    Tick { case: String, watch_id: String },
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let json = cli.json;
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            if json {
                say!("{}", serde_json::json!({ "error": e.to_api() }));
            }
            eprintln!("error[{}]: {e}", e.code());
            e.class().exit_code()
        }
    }
}

fn emit<T: Serialize>(json: bool, value: &T) {
    let text = if json {
        serde_json::to_string(value)
    } else {
        serde_json::to_string_pretty(value)
    };
    say!("{}", text.expect("output serializes"));
}

fn json_arg<T: serde::de::DeserializeOwned>(arg: &str) -> Result<T, ServiceError> {
    let text = match arg.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path)?,
        None => arg.to_string(),
    };
    serde_json::from_str(&text).map_err(|e| ServiceError::InvalidRequest(e.to_string()))
}

fn with_case(cli: &Cli, id: &str) -> Result<(Engine, Arc<Case>), ServiceError> {
    let engine = Engine::open(&cli.data_root)?;
    let case = engine.case(id)?;
    Ok((engine, case))
}

fn print_records(json: bool, recs: &[ImportRecord]) {
    if json {
        emit(true, &recs);
        return;
    }
    for r in recs {
        say!("{}\t{:?}\t{} docs\t{}", r.import_id, r.status, r.docs_indexed, r.config_id);
    }
}

fn dispatch(cli: Cli) -> Result<(), ServiceError> {
    let json = cli.json;
    match &cli.command {
        Command::Create { case } => {
            let engine = Engine::open(&cli.data_root)?;
            emit(json, &engine.create_case(case)?.status()?);
        }
        Command::List => {
            let ids = Engine::open(&cli.data_root)?.list()?;
            if json {
                emit(true, &ids);
            } else {
                ids.iter().for_each(|id| say!("{id}"));
            }
        }
        Command::Status { case } => {
            let engine = Engine::open(&cli.data_root)?;
            match case {
                Some(id) => emit(json, &engine.status(id)?),
                None => emit(json, &engine.status_all()?),
            }
        }
        Command::Destroy { case } => {
            Engine::open(&cli.data_root)?.destroy_case(case)?;
            if json {
                emit(true, &serde_json::json!({ "destroyed": case }));
            }
        }
        Command::Start { case } => {
            let (_e, c) = with_case(&cli, case)?;
            c.start()?;
            emit(json, &c.status()?);
        }
        Command::Stop { case } => {
            let (_e, c) = with_case(&cli, case)?;
            c.stop()?;
            emit(json, &c.status()?);
        }
        Command::Backup { case, out } => {
            let (e, c) = with_case(&cli, case)?;
            emit(json, &ops::backup(&e, &c, out.clone())?);
        }
        Command::Restore { archive, case } => {
            let engine = Engine::open(&cli.data_root)?;
            emit(json, &engine.restore_case(archive, case)?.status()?);
        }
        Command::Import { case, inputs, config } => {
            let (_e, c) = with_case(&cli, case)?;
            let rec = c.import(inputs, config.to_ref())?;
            emit(json, &rec);
            if !rec.succeeded() {
                return Err(ServiceError::Internal(format!("import {} failed", rec.import_id)));
            }
        }
        Command::Config { case, config_id, config } => {
            let (_e, c) = with_case(&cli, case)?;
            let cfg = config.build(config_id);
            c.save_config(cfg.clone())?;
            emit(json, &cfg);
        }
        Command::History { case, import_id } => {
            let (_e, c) = with_case(&cli, case)?;
            match import_id {
                Some(id) => {
                    let rec = c
                        .import_record(id)?
                        .ok_or_else(|| ServiceError::UnknownImport(id.clone()))?;
                    emit(json, &rec);
                }
                None => print_records(json, &c.history()?),
            }
        }
        Command::Detect(Detect::Portscan {
            case,
            day,
            pair_min,
            total_min,
            max_buckets,
            csv,
        }) => {
            let (_e, c) = with_case(&cli, case)?;
            let p = PortScanParams {
                day: *day,
                pair_min: *pair_min,
                total_min: *total_min,
                max_buckets: *max_buckets,
            };
            if json {
                emit(true, &ops::portscan(&c, &p)?);
            } else if *csv {
                say!("{}", ops::portscan_report(&c, &p)?.to_csv().trim_end());
            } else {
                print_report(&ops::portscan_report(&c, &p)?);
            }
        }
        Command::Detect(Detect::Histogram {
            case,
            day,
            pair_floor,
            max_buckets,
        }) => {
            let (_e, c) = with_case(&cli, case)?;
            let p = HistogramParams {
                day: *day,
                pair_floor: *pair_floor,
                max_buckets: *max_buckets,
            };
            emit(json, &ops::histogram(&c, &p)?);
        }
        Command::Watch(Watch::Add {
            case,
            watch_id,
            directory,
            config_id,
            interval,
            disabled,
        }) => {
            let (_e, c) = with_case(&cli, case)?;
            let req = WatchRequest {
                directory: directory.clone(),
                config_id: config_id.clone(),
                poll_interval: *interval,
                enabled: Some(!disabled),
            };
            let changed = c.put_watch(req.into_config(watch_id))?;
            emit(
                json,
                &ops::WatchResponse {
                    watch_id: watch_id.clone(),
                    changed,
                },
            );
        }
        Command::Watch(Watch::Remove { case, watch_id }) => {
            let (_e, c) = with_case(&cli, case)?;
            c.remove_watch(watch_id)?;
        }
        Command::Watch(Watch::Tick { case, watch_id }) => {
            let (_e, c) = with_case(&cli, case)?;
            print_records(json, &c.tick_watch(watch_id)?);
        }
        Command::Query {
            case,
            filter,
            limit,
            offset,
        } => {
            let (_e, c) = with_case(&cli, case)?;
            let filter: QueryFilter = filter.as_deref().map(json_arg).transpose()?.unwrap_or_default();
            let req = QueryRequest {
                filter,
                limit: *limit,
                offset: *offset,
            };
            emit(json, &ops::query(&c, &req)?);
        }
        Command::Aggregate {
            case,
            spec,
            filter,
            max_buckets,
        } => {
            let (_e, c) = with_case(&cli, case)?;
            let aggregation: AggregationSpec = json_arg(spec)?;
            let filter: QueryFilter = filter.as_deref().map(json_arg).transpose()?.unwrap_or_default();
            let req = AggregateRequest {
                filter,
                aggregation,
                max_buckets: *max_buckets,
            };
            emit(json, &ops::aggregate(&c, &req)?);
        }
        Command::Cleanup { case, day } => {
            let (_e, c) = with_case(&cli, case)?;
            let removed = c.cleanup(day.map_or(CleanupScope::All, CleanupScope::ByDay))?;
            emit(json, &serde_json::json!({ "removed": removed }));
        }
        Command::Generate { dir, seed } => {
            let mut config = ReplicaConfig::default();
            if let Some(s) = seed {
                config.seed = *s;
            }
            let files = Replica::generate(config).write(dir)?;
            emit(json, &files);
        }
        Command::Serve { bind, port } => {
            let config = ServeConfig {
                bind: *bind,
                port: *port,
                data_root: cli.data_root.clone(),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(api::serve(config))?;
        }
    }
    Ok(())
}

fn print_report(report: &DetectionReport) {
    if report.entries.is_empty() {
        say!("no sender exceeds the thresholds on {}", report.day);
        return;
    }
    say!("{:<40} {:>12} {:>10}", "sender", "total_count", "receivers");
    for s in &report.entries {
        say!("{:<40} {:>12} {:>10}", s.sender_ip, s.total_count, s.receivers.len());
        for r in &s.receivers {
            say!("  {:<38} {:>12}", r.receiver_ip, r.unique_ports);
        }
    }
}
