//! Pipeline runs, artifact inspection, tier servers, and weight publishing.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use clap::{Parser, Subcommand};

use hypercast_core::config::{load_config, preset, write_config};
use hypercast_core::encoder::EncoderConfig;
use hypercast_core::error::{Error, Result};
use hypercast_core::expert::ExpertConfig;
use hypercast_core::experiments::run_pipeline_mode;
use hypercast_core::fm::export_inference_subgraph;
use hypercast_core::params::read_checkpoint;
use hypercast_core::pipeline::inspect;
use hypercast_core::serving::{
    EmbeddingRecord, EmbeddingStore, ExpertServer, FmEmbedRequest, LogTierConfig, Publisher,
    VersionRegistry,
};
use hypercast_core::stream::read_event_log;
use hypercast_core::wire::{
    paramset_to_wire_blocks, serve, ExpertTier, FmEndpoint, FmTier, WireBlock, WireClient,
    WireRequest, WireResponse,
};

#[derive(Parser)]
#[command(name = "hypercast", about = "Foundation-expert pipeline and serving tiers", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment pipeline end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// In-process tier wiring (direct calls). Disable to route serving
        /// and weight sync through real loopback tier servers.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        harness_mode: bool,
    },
    /// Print a human-readable dump of a checkpoint or log file.
    Inspect {
        path: PathBuf,
    },
    /// Serve target-aware embeddings from a checkpoint.
    ServeFm {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve expert predictions, optionally fetching embeddings from a
    /// running FM tier.
    ServeExpert {
        #[arg(long)]
        config: PathBuf,
    },
    /// Replay an event log against an FM tier and materialize embeddings.
    LogTier {
        #[arg(long)]
        config: PathBuf,
    },
    /// Periodically publish a fraction of checkpoint weights to a tier.
    Publish {
        /// Trainer checkpoint to publish from (re-read every period).
        #[arg(long)]
        from: PathBuf,
        /// Address of the FM tier admin endpoint.
        #[arg(long)]
        target: String,
        #[arg(long)]
        version: String,
        #[arg(long, default_value_t = 0.3)]
        fraction: f64,
        /// Seconds between publishes.
        #[arg(long, default_value_t = 60)]
        period: u64,
        /// Number of publishes before exiting (0 = run forever).
        #[arg(long, default_value_t = 0)]
        count: u64,
        /// Register the version (full snapshot) before publishing.
        #[arg(long, default_value_t = false)]
        register: bool,
    },
    /// Write a default configuration file for an experiment preset.
    InitConfig {
        /// One of: smoke, transfer, ablation, generalization.
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ServeFmFileConfig {
    addr: String,
    checkpoint: PathBuf,
    version: String,
    encoder: EncoderConfig,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ServeExpertFileConfig {
    addr: String,
    checkpoint: PathBuf,
    expert: ExpertConfig,
    fm_encoder: EncoderConfig,
    /// FM tier address for fetch-directive requests; omit for
    /// precomputed-only serving.
    fm_addr: Option<String>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct LogTierFileConfig {
    /// FM tier to fetch embeddings from.
    fm_addr: String,
    /// Event log to replay.
    events: PathBuf,
    /// Embedding log to append to.
    out: PathBuf,
    /// Versions to materialize.
    versions: Vec<String>,
    #[serde(default)]
    batch_size: Option<usize>,
    #[serde(default)]
    capacity: Option<usize>,
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn wait_forever() {
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            harness_mode,
        } => {
            let mut run = load_config(&config)?;
            if let Some(seed) = seed {
                run.seed = seed;
            }
            let summary = run_pipeline_mode(&run, &out, harness_mode)?;
            println!(
                "run complete: {} events, {} embedding records, {} missing joins",
                summary.events_total, summary.embedding_records, summary.join_missing
            );
            for r in &summary.reports {
                println!("report: {}", out.join(r).display());
            }
            Ok(())
        }
        Command::Inspect { path } => {
            print!("{}", inspect(&path)?);
            Ok(())
        }
        Command::ServeFm { config } => {
            let cfg: ServeFmFileConfig = read_json_config(&config)?;
            let (params, _) = read_checkpoint(&cfg.checkpoint)?;
            let pruned = export_inference_subgraph(&params);
            let registry = Arc::new(RwLock::new(VersionRegistry::new()));
            registry.write().unwrap().register(cfg.version.clone(), pruned, 0);
            let tier = Arc::new(FmTier::new(Arc::clone(&registry), cfg.encoder.clone()));
            tier.set_encoder(&cfg.version, cfg.encoder.clone());
            let handler_tier = Arc::clone(&tier);
            let server = serve(cfg.addr.as_str(), Arc::new(move |req| handler_tier.handle(req)))?;
            println!("fm tier serving {} on {}", cfg.version, server.local_addr);
            wait_forever();
            unreachable!()
        }
        Command::ServeExpert { config } => {
            let cfg: ServeExpertFileConfig = read_json_config(&config)?;
            let (params, tag) = read_checkpoint(&cfg.checkpoint)?;
            if let Some(tag) = &tag {
                if tag != &cfg.expert.fm_version {
                    return Err(Error::VersionMismatch {
                        expected: cfg.expert.fm_version.clone(),
                        got: tag.clone(),
                    });
                }
            }
            let server_core = ExpertServer::new(params, cfg.expert, cfg.fm_encoder);
            let fm = match cfg.fm_addr {
                Some(addr) => FmEndpoint::Remote(addr),
                None => FmEndpoint::Local(Arc::new(RwLock::new(VersionRegistry::new()))),
            };
            let tier = Arc::new(ExpertTier {
                server: server_core,
                fm,
            });
            let handler_tier = Arc::clone(&tier);
            let server = serve(cfg.addr.as_str(), Arc::new(move |req| handler_tier.handle(req)))?;
            println!("expert tier serving on {}", server.local_addr);
            wait_forever();
            unreachable!()
        }
        Command::LogTier { config } => {
            let cfg: LogTierFileConfig = read_json_config(&config)?;
            let events = read_event_log(&cfg.events)?;
            let mut store = EmbeddingStore::with_file(
                &cfg.out,
                LogTierConfig {
                    batch_size: cfg.batch_size.unwrap_or(1024),
                    capacity: cfg.capacity.unwrap_or(65_536),
                },
            )?;
            let mut logged = 0usize;
            // Group events by request and fetch embeddings per version.
            let mut i = 0;
            while i < events.len() {
                let mut j = i;
                while j < events.len() && events[j].request_id == events[i].request_id {
                    j += 1;
                }
                let targets: Vec<_> = events[i..j]
                    .iter()
                    .map(|ev| {
                        hypercast_core::encoder::ItemFeatures::target(
                            ev.item_id,
                            ev.surface_id,
                            ev.ctx.time_bucket,
                        )
                    })
                    .collect();
                for version in &cfg.versions {
                    let resp = hypercast_core::wire::fetch_fm_over_wire(
                        &cfg.fm_addr,
                        &FmEmbedRequest {
                            version: Some(version.clone()),
                            history: Vec::new(),
                            targets: targets.clone(),
                        },
                    )?;
                    for (ev, vector) in events[i..j].iter().zip(resp.embeddings) {
                        store.append(EmbeddingRecord {
                            request_id: ev.request_id,
                            user_id: ev.user_id,
                            item_id: ev.item_id,
                            version: version.clone(),
                            vector,
                            served_ts: ev.ts,
                        })?;
                        logged += 1;
                    }
                }
                i = j;
            }
            store.flush()?;
            println!("materialized {logged} embedding records to {}", cfg.out.display());
            Ok(())
        }
        Command::Publish {
            from,
            target,
            version,
            fraction,
            period,
            count,
            register,
        } => {
            let (params, _) = read_checkpoint(&from)?;
            let pruned = export_inference_subgraph(&params);
            let mut publisher = Publisher::new(version.clone(), &pruned);
            let mut client = WireClient::connect(target.as_str())?;
            if register {
                let resp = client.request(&WireRequest::AdminRegisterVersion {
                    version: version.clone(),
                    now: now_secs(),
                    primary: true,
                    blocks: paramset_to_wire_blocks(&pruned),
                })?;
                expect_ack(resp)?;
                println!("registered {version}");
            }
            let mut published = 0u64;
            loop {
                let (params, _) = read_checkpoint(&from)?;
                let pruned = export_inference_subgraph(&params);
                let delta = publisher.publish_partial(&pruned, fraction)?;
                let blocks: Vec<WireBlock> =
                    delta.blocks.iter().map(WireBlock::from_delta).collect();
                let resp = client.request(&WireRequest::AdminApplyDelta {
                    version: version.clone(),
                    seq: delta.seq,
                    now: now_secs(),
                    blocks,
                })?;
                expect_ack(resp)?;
                published += 1;
                println!(
                    "published seq {} ({} blocks)",
                    delta.seq,
                    delta.blocks.len()
                );
                if count > 0 && published >= count {
                    return Ok(());
                }
                std::thread::sleep(std::time::Duration::from_secs(period));
            }
        }
        Command::InitConfig { experiment, out } => {
            let cfg = preset(&experiment)?;
            write_config(&out, &cfg)?;
            println!("wrote {} preset to {}", experiment, out.display());
            Ok(())
        }
    }
}

fn expect_ack(resp: WireResponse) -> Result<()> {
    match resp {
        WireResponse::Ack { .. } => Ok(()),
        WireResponse::Error { code, message } => {
            Err(Error::Wire(format!("{code}: {message}")))
        }
        other => Err(Error::Wire(format!("unexpected response {other:?}"))),
    }
}

fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
