#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, ChildStdout, Command, Output, Stdio};

pub const BIN: &str = env!("CARGO_BIN_EXE_groundseg");

/// A child `groundseg` server; killed on drop.
pub struct Server {
    child: Child,
    _stdout: BufReader<ChildStdout>,
    pub url: String,
}

impl Server {
    /// Starts `groundseg <args>` and waits for its "listening on" line.
    pub fn spawn(args: &[&str]) -> Server {
        let mut child = Command::new(BIN)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn groundseg");
        let mut stdout = BufReader::new(child.stdout.take().unwrap());
        let mut line = String::new();
        stdout.read_line(&mut line).expect("read listen line");
        let url = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
            .to_string();
        Server {
            child,
            _stdout: stdout,
            url,
        }
    }

    pub fn mock(fixtures: &Path, extra: &[&str]) -> Server {
        let mut args = vec!["mock-backend", "--scenes", fixtures.to_str().unwrap()];
        args.extend_from_slice(extra);
        Server::spawn(&args)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("run groundseg")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A port that was free a moment ago.
pub fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

pub fn gen_fixtures(dir: &Path, count: usize, min_objects: usize, seed: u64) {
    let o = run(&[
        "gen-fixtures",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--min-objects",
        &min_objects.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "gen-fixtures: {}", stderr(&o));
}

pub mod fake_http {
    //! One-shot scripted HTTP server: answers each request with the next
    //! scripted reply and counts requests.

    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    #[derive(Clone)]
    pub struct Reply {
        pub status: u16,
        pub body: String,
        pub delay: Duration,
    }

    impl Reply {
        pub fn new(status: u16, body: impl Into<String>) -> Self {
            Reply {
                status,
                body: body.into(),
                delay: Duration::ZERO,
            }
        }

        pub fn delayed(mut self, d: Duration) -> Self {
            self.delay = d;
            self
        }
    }

    pub struct FakeServer {
        pub url: String,
        hits: Arc<AtomicUsize>,
    }

    impl FakeServer {
        /// Replies follow `script`; the last entry repeats once it runs out.
        pub fn start(script: Vec<Reply>) -> FakeServer {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            let url = format!("http://{}", listener.local_addr().unwrap());
            let hits = Arc::new(AtomicUsize::new(0));
            let counter = hits.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(mut stream) = stream else { return };
                    let n = counter.fetch_add(1, Ordering::SeqCst);
                    let reply = script[n.min(script.len() - 1)].clone();
                    std::thread::spawn(move || {
                        let mut reader = BufReader::new(stream.try_clone().unwrap());
                        let mut len = 0usize;
                        loop {
                            let mut line = String::new();
                            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                                return;
                            }
                            let l = line.trim_end();
                            if l.is_empty() {
                                break;
                            }
                            if let Some((k, v)) = l.split_once(':') {
                                if k.eq_ignore_ascii_case("content-length") {
                                    len = v.trim().parse().unwrap_or(0);
                                }
                            }
                        }
                        let mut body = vec![0; len];
                        let _ = reader.read_exact(&mut body);
                        std::thread::sleep(reply.delay);
                        let _ = write!(
                            stream,
                            "HTTP/1.1 {} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                            reply.status,
                            reply.body.len(),
                            reply.body
                        );
                        let _ = stream.flush();
                    });
                }
            });
            FakeServer { url, hits }
        }

        pub fn hits(&self) -> usize {
            self.hits.load(Ordering::SeqCst)
        }
    }
}
