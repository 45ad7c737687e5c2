//! Multi-process runs over local TCP using the [`wire`](crate::wire)
//! format. The launching process hosts the [`Hub`] and serves one
//! connection per worker process; workers read the task file and images
//! themselves and talk to the hub only for scheduling and parameters.

use crate::driver::{psf_reach, RunOptions};
use crate::error::{Error, Result};
use crate::exec::{process_loop, CoordinatorRunner, ProcessOptions};
use crate::hub::{Assignment, Claim, Client, Hub, RunOutcome, TaskReport};
use crate::images::{DirImages, ImageSource};
use crate::wire::{read_message, write_message, Message};
use parking_lot::Mutex;
use skyvi_core::config::Config;
use skyvi_core::io::read_tasks;
use skyvi_core::model::ParamVec;
use skyvi_core::partition::Task;
use std::collections::{HashMap, HashSet};
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Hosts a run whose processes connect over TCP. `launch` is called once
/// per process with the hub's address and the process id, and must start
/// something that calls [`run_worker`]; it should not wait for it.
#[allow(clippy::too_many_arguments)]
pub fn run_tcp(
    tasks: Vec<Task>,
    task_file: &Path,
    image_dir: &Path,
    cfg: &Config,
    opts: &RunOptions,
    accept_timeout: Duration,
    launch: &mut dyn FnMut(SocketAddr, usize) -> Result<()>,
) -> Result<RunOutcome> {
    if opts.threads == 0 {
        return Err(Error::invalid("need at least one thread per process"));
    }
    let images = DirImages {
        dir: image_dir.to_path_buf(),
    };
    let reach = psf_reach(&tasks, &images)?;
    let hub = Hub::new(tasks, reach, opts.processes, cfg)?;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    for p in 0..opts.processes {
        launch(addr, p)?;
    }
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + accept_timeout;
    let mut streams = Vec::with_capacity(opts.processes);
    while streams.len() < opts.processes {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                s.set_nodelay(true)?;
                streams.push(s);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() > deadline {
                    return Err(Error::Protocol(format!(
                        "only {} of {} worker processes connected within {accept_timeout:?}",
                        streams.len(),
                        opts.processes
                    )));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let welcome = Message::Welcome {
        seed: opts.seed,
        threads: opts.threads as u32,
        config: cfg.to_toml_string(),
        task_file: absolute(task_file)?.display().to_string(),
        image_dir: absolute(image_dir)?.display().to_string(),
    };
    let seen = Mutex::new(HashSet::new());
    let errors: Vec<Error> = std::thread::scope(|s| {
        let handles: Vec<_> = streams
            .into_iter()
            .map(|stream| {
                let (hub, welcome, seen) = (&hub, &welcome, &seen);
                s.spawn(move || {
                    let r = serve_connection(stream, hub, welcome, seen, opts.processes);
                    if let Err(e) = &r {
                        hub.abort(&e.to_string());
                    }
                    r
                })
            })
            .collect();
        handles
            .into_iter()
            .filter_map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("connection thread panicked".into()))).err())
            .collect()
    });
    if let Some(msg) = hub.aborted() {
        return Err(errors.into_iter().next().unwrap_or(Error::Aborted(msg)));
    }
    hub.finish()
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

fn serve_connection(
    stream: TcpStream,
    hub: &Hub,
    welcome: &Message,
    seen: &Mutex<HashSet<u32>>,
    processes: usize,
) -> Result<()> {
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::new(stream);
    let process = match read_message(&mut r)? {
        Some(Message::Hello { process }) => process,
        other => return Err(Error::Protocol(format!("expected HELLO, got {other:?}"))),
    };
    if process as usize >= processes || !seen.lock().insert(process) {
        write_message(&mut w, &Message::Error {
            message: format!("process id {process} is out of range or taken"),
        })?;
        return Err(Error::Protocol(format!("bad HELLO from process {process}")));
    }
    write_message(&mut w, welcome)?;
    let p = process as usize;
    loop {
        let Some(m) = read_message(&mut r)? else {
            if hub.is_finished() {
                return Ok(());
            }
            return Err(Error::Protocol(format!("process {p} disconnected before the run finished")));
        };
        let reply = match m {
            Message::Claim { blocking } => match hub.claim(p, blocking) {
                Ok(Claim::Task(a)) => Message::Task {
                    task: a.task.id,
                    neighbors: a.neighbors.to_vec(),
                },
                Ok(Claim::NotNow) => Message::NotNow,
                Ok(Claim::Done) => Message::Done,
                Err(e) => Message::Error { message: e.to_string() },
            },
            Message::Get { source } => match hub.store().get_staged(source) {
                Ok(v) => Message::Block { block: v.value },
                Err(e) => Message::Error { message: e.to_string() },
            },
            Message::Put { source, block } => match hub.store().put(source, block) {
                Ok(stamp) => Message::Stamp { stamp },
                Err(e) => Message::Error { message: e.to_string() },
            },
            Message::Report {
                task,
                processing,
                loading_wait,
                visits,
                newton_iterations,
                rows,
                error,
            } => {
                let rep = TaskReport {
                    task,
                    processing,
                    loading_wait,
                    visits,
                    newton_iterations,
                    rows,
                    error,
                };
                match hub.report(rep) {
                    Ok(()) => Message::Ack,
                    Err(e) => Message::Error { message: e.to_string() },
                }
            }
            Message::Abort { reason } => {
                return Err(Error::Aborted(format!("process {p}: {reason}")));
            }
            other => Message::Error {
                message: format!("unexpected message tag {:#04x}", other.tag()),
            },
        };
        write_message(&mut w, &reply)?;
    }
}

/// Worker side of [`run_tcp`].
pub struct RemoteClient {
    r: BufReader<TcpStream>,
    w: BufWriter<TcpStream>,
    tasks: HashMap<u64, Arc<Task>>,
}

impl RemoteClient {
    fn call(&mut self, m: &Message) -> Result<Message> {
        write_message(&mut self.w, m)?;
        match read_message(&mut self.r)? {
            Some(Message::Error { message }) => Err(Error::Protocol(message)),
            Some(reply) => Ok(reply),
            None => Err(Error::Protocol("hub closed the connection".into())),
        }
    }
}

fn unexpected(m: Message) -> Error {
    Error::Protocol(format!("unexpected reply tag {:#04x}", m.tag()))
}

impl Client for RemoteClient {
    fn claim(&mut self, blocking: bool) -> Result<Claim> {
        match self.call(&Message::Claim { blocking })? {
            Message::Task { task, neighbors } => {
                let t = self
                    .tasks
                    .get(&task)
                    .ok_or_else(|| Error::Protocol(format!("hub assigned task {task}, which is not in the task file")))?;
                Ok(Claim::Task(Assignment {
                    task: t.clone(),
                    neighbors: Arc::new(neighbors),
                }))
            }
            Message::NotNow => Ok(Claim::NotNow),
            Message::Done => Ok(Claim::Done),
            m => Err(unexpected(m)),
        }
    }

    fn get(&mut self, id: u64) -> Result<ParamVec> {
        match self.call(&Message::Get { source: id })? {
            Message::Block { block } => Ok(block),
            m => Err(unexpected(m)),
        }
    }

    fn put(&mut self, id: u64, value: ParamVec) -> Result<u64> {
        match self.call(&Message::Put { source: id, block: value })? {
            Message::Stamp { stamp } => Ok(stamp),
            m => Err(unexpected(m)),
        }
    }

    fn report(&mut self, r: TaskReport) -> Result<()> {
        let m = Message::Report {
            task: r.task,
            processing: r.processing,
            loading_wait: r.loading_wait,
            visits: r.visits,
            newton_iterations: r.newton_iterations,
            rows: r.rows,
            error: r.error,
        };
        match self.call(&m)? {
            Message::Ack => Ok(()),
            m => Err(unexpected(m)),
        }
    }

    fn abort(&mut self, msg: &str) {
        let _ = write_message(&mut self.w, &Message::Abort { reason: msg.to_string() });
    }
}

/// Connects to the hub as `process` and works until the run is done.
pub fn run_worker(addr: SocketAddr, process: u32) -> Result<()> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::new(stream);
    write_message(&mut w, &Message::Hello { process })?;
    let (seed, threads, config, task_file, image_dir) = match read_message(&mut r)? {
        Some(Message::Welcome {
            seed,
            threads,
            config,
            task_file,
            image_dir,
        }) => (seed, threads, config, task_file, image_dir),
        Some(Message::Error { message }) => return Err(Error::Protocol(message)),
        other => return Err(Error::Protocol(format!("expected WELCOME, got {other:?}"))),
    };
    let mut client = RemoteClient { r, w, tasks: HashMap::new() };
    let setup = (|| -> Result<(Config, Vec<Task>)> {
        Ok((Config::from_toml_str(&config)?, read_tasks(Path::new(&task_file))?))
    })();
    let (cfg, tasks) = match setup {
        Ok(s) => s,
        Err(e) => {
            client.abort(&e.to_string());
            return Err(e);
        }
    };
    client.tasks = tasks.into_iter().map(|t| (t.id, Arc::new(t))).collect();
    let images: Arc<dyn ImageSource> = Arc::new(DirImages {
        dir: PathBuf::from(image_dir),
    });
    let runner = CoordinatorRunner {
        config: &cfg,
        options: ProcessOptions {
            threads: threads as usize,
            seed,
        },
    };
    let r = process_loop(&mut client, images, &runner);
    if let Err(e) = &r {
        client.abort(&e.to_string());
    }
    r
}
