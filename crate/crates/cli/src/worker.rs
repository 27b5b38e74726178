//! Where a session's worker comes from: a subprocess, a TCP peer or the
//! built-in mock.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Child;
use std::thread;

use anyhow::{bail, Context, Result};
use clap::Args;

use streameval::metrics::FactoryError;
use streameval::mock::{AnswerPolicy, MockConfig, MockWorker};
use streameval::protocol::{connect_tcp, duplex, spawn_worker, WorkerLink};
use streameval::time::ClockKind;

#[derive(Debug, Clone, Args)]
pub struct WorkerArgs {
    /// Shell command that starts a worker speaking the protocol on stdio.
    #[arg(long, conflicts_with_all = ["connect", "mock_config"])]
    pub worker_cmd: Option<String>,
    /// Address of a worker listening on TCP.
    #[arg(long, conflicts_with = "mock_config")]
    pub connect: Option<String>,
    /// Built-in mock worker settings (TOML). The mock is used when no other
    /// worker is given.
    #[arg(long)]
    pub mock_config: Option<PathBuf>,
    #[command(flatten)]
    pub mock: MockOverrides,
}

/// Flags that adjust the built-in mock on top of its config file.
#[derive(Debug, Clone, Default, Args)]
pub struct MockOverrides {
    /// Seconds to encode one frame.
    #[arg(long)]
    pub encode_cost: Option<f64>,
    /// Visual tokens reported per frame.
    #[arg(long)]
    pub tokens_per_frame: Option<u64>,
    /// Seconds to encode a query.
    #[arg(long)]
    pub query_encode_cost: Option<f64>,
    /// Seconds from query encoding to the first answer token.
    #[arg(long)]
    pub first_token_delay: Option<f64>,
    /// Seconds between answer tokens.
    #[arg(long)]
    pub inter_token: Option<f64>,
    /// Tokens per answer.
    #[arg(long)]
    pub answer_len: Option<u64>,
    /// `oracle`, `fixed:<label>` or `random:<seed>`.
    #[arg(long)]
    pub answer_policy: Option<AnswerPolicy>,
    /// Serialize frame encoding and query work on one lane.
    #[arg(long)]
    pub no_overlap: bool,
}

impl MockOverrides {
    pub fn apply(&self, mut c: MockConfig) -> MockConfig {
        if let Some(v) = self.encode_cost {
            c.encode_cost_s = v;
        }
        if let Some(v) = self.tokens_per_frame {
            c.tokens_per_frame = v;
        }
        if let Some(v) = self.query_encode_cost {
            c.query_encode_cost_s = v;
        }
        if let Some(v) = self.first_token_delay {
            c.first_token_delay_s = v;
        }
        if let Some(v) = self.inter_token {
            c.inter_token_s = v;
        }
        if let Some(v) = self.answer_len {
            c.answer_len_tokens = v;
        }
        if let Some(v) = &self.answer_policy {
            c.answer_policy = v.clone();
        }
        if self.no_overlap {
            c.overlap_encode_and_decode = false;
        }
        c
    }
}

pub fn load_mock_config(path: Option<&PathBuf>, overrides: &MockOverrides) -> Result<MockConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))?;
            MockConfig::from_toml(&text)
                .with_context(|| format!("invalid mock config {}", p.display()))?
        }
        None => MockConfig::default(),
    };
    let c = overrides.apply(base);
    c.validate().context("invalid mock settings")?;
    Ok(c)
}

/// A resolved worker choice that can start fresh workers on demand.
pub enum WorkerSource {
    Command(String),
    Tcp(String),
    Mock {
        config: MockConfig,
        answers: BTreeMap<String, String>,
        clock: ClockKind,
    },
}

/// What must be cleaned up once a worker's session ends.
pub struct WorkerGuard {
    child: Option<Child>,
    server: Option<thread::JoinHandle<()>>,
}

impl WorkerSource {
    pub fn resolve(
        args: &WorkerArgs,
        clock: ClockKind,
        answers: BTreeMap<String, String>,
    ) -> Result<Self> {
        if let Some(cmd) = &args.worker_cmd {
            return Ok(WorkerSource::Command(cmd.clone()));
        }
        if let Some(addr) = &args.connect {
            return Ok(WorkerSource::Tcp(addr.clone()));
        }
        Ok(WorkerSource::Mock {
            config: load_mock_config(args.mock_config.as_ref(), &args.mock)?,
            answers,
            clock,
        })
    }

    pub fn start(&self) -> Result<(WorkerLink, WorkerGuard), FactoryError> {
        match self {
            WorkerSource::Command(cmd) => {
                let (link, child) = spawn_worker(cmd)?;
                Ok((
                    link,
                    WorkerGuard {
                        child: Some(child),
                        server: None,
                    },
                ))
            }
            WorkerSource::Tcp(addr) => Ok((
                connect_tcp(addr)?,
                WorkerGuard {
                    child: None,
                    server: None,
                },
            )),
            WorkerSource::Mock {
                config,
                answers,
                clock,
            } => {
                let mock = MockWorker::with_answer_key(config.clone(), answers.clone())?;
                match clock {
                    ClockKind::Virtual => Ok((
                        mock.into_link(),
                        WorkerGuard {
                            child: None,
                            server: None,
                        },
                    )),
                    ClockKind::Wall => {
                        let (harness, worker) = duplex();
                        let server = thread::spawn(move || {
                            if let Err(e) = mock.serve(worker) {
                                log::warn!("mock worker: {e}");
                            }
                        });
                        Ok((
                            harness,
                            WorkerGuard {
                                child: None,
                                server: Some(server),
                            },
                        ))
                    }
                }
            }
        }
    }
}

impl WorkerGuard {
    /// Waits for the worker to exit. A worker that ignores `shutdown` is
    /// killed after `grace`.
    pub fn finish(mut self, grace: std::time::Duration) {
        if let Some(c) = self.child.as_mut() {
            let deadline = std::time::Instant::now() + grace;
            loop {
                match c.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if std::time::Instant::now() < deadline => {
                        thread::sleep(std::time::Duration::from_millis(20))
                    }
                    _ => {
                        log::warn!("worker still running after shutdown; killing it");
                        let _ = c.kill();
                        let _ = c.wait();
                        break;
                    }
                }
            }
        }
        if let Some(s) = self.server.take() {
            let _ = s.join();
        }
    }
}

pub fn ensure_single_worker(args: &WorkerArgs) -> Result<()> {
    if args.connect.is_some() {
        bail!("--connect reaches a single worker; the probe needs a fresh worker per trial (use --worker-cmd)");
    }
    Ok(())
}
