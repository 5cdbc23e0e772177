use std::io::Read;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{check_latency, BenchmarkProtocol, LatencyProvider};
use crate::error::{Error, Result};
use crate::graph::{save_model, ModelGraph, Signature};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

/// Runs a shell command per measurement. The template may use
/// `{model_path}`, `{weights_path}`, `{warmup}`, `{iters}` and `{aggregate}`;
/// the command must print a single number of milliseconds.
#[derive(Clone, Debug)]
pub struct ExternalProvider {
    template: String,
    timeout: Duration,
}

impl ExternalProvider {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if template.trim().is_empty() {
            return Err(Error::InvalidArgument("empty benchmark command".into()));
        }
        Ok(Self {
            template,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn render(&self, model_path: &str, weights_path: &str, protocol: &BenchmarkProtocol) -> String {
        self.template
            .replace("{model_path}", model_path)
            .replace("{weights_path}", weights_path)
            .replace("{warmup}", &protocol.warmup_iters.to_string())
            .replace("{iters}", &protocol.measure_iters.to_string())
            .replace("{aggregate}", &protocol.aggregate.to_string())
    }

    fn run(&self, command: &str) -> Result<String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Provider(format!("cannot start `{command}`: {e}")))?;
        let stdout = drain(child.stdout.take());
        let stderr = drain(child.stderr.take());
        let started = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Provider(format!(
                    "`{command}` timed out after {:.1} s",
                    self.timeout.as_secs_f64()
                )));
            }
            thread::sleep(Duration::from_millis(5));
        };
        let out = stdout.join().unwrap_or_default();
        let err = stderr.join().unwrap_or_default();
        if !status.success() {
            return Err(Error::Provider(format!(
                "`{command}` exited with {status}: {}",
                err.trim()
            )));
        }
        Ok(out)
    }
}

fn drain(pipe: Option<impl Read + Send + 'static>) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// Exactly one positive decimal number, surrounding whitespace allowed.
pub fn parse_latency_output(stdout: &str) -> Result<f64> {
    let mut tokens = stdout.split_whitespace();
    let (Some(token), None) = (tokens.next(), tokens.next()) else {
        return Err(Error::Provider(format!(
            "expected a single number on stdout, got `{}`",
            stdout.trim()
        )));
    };
    let ms: f64 = token
        .parse()
        .map_err(|_| Error::Provider(format!("cannot parse `{token}` as milliseconds")))?;
    check_latency(ms)
}

impl LatencyProvider for ExternalProvider {
    fn measure(&self, model: &ModelGraph, _signature: &Signature, protocol: &BenchmarkProtocol) -> Result<f64> {
        protocol.check()?;
        let dir = tempfile::tempdir()?;
        let model_path = dir.path().join("model.json");
        let weights_path = dir.path().join("model.bin");
        save_model(model, &model_path, Some(&weights_path))?;
        let command = self.render(
            &model_path.to_string_lossy(),
            &weights_path.to_string_lossy(),
            protocol,
        );
        let out = self.run(&command)?;
        parse_latency_output(&out)
    }

    fn fingerprint(&self) -> String {
        format!("command:{}", self.template)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn measure(template: &str) -> Result<f64> {
        let model = crate::toy::mlp(2, &[], 2, 0);
        let sig = crate::graph::build_channel_groups(&model).unwrap().root_signature();
        ExternalProvider::new(template)?.measure(&model, &sig, &BenchmarkProtocol::EXPLORATION)
    }

    #[test]
    fn echo() {
        assert_eq!(measure("echo 12.5").unwrap(), 12.5);
    }

    #[test]
    fn failure_carries_stderr() {
        let err = measure("echo device busy >&2; exit 1").unwrap_err();
        assert!(err.is_provider_failure());
        assert!(err.to_string().contains("device busy"), "{err}");
    }

    #[test]
    fn placeholders_are_substituted() {
        assert_eq!(measure("test -s {model_path} && test -s {weights_path} && echo {iters}").unwrap(), 300.0);
        assert_eq!(measure("echo {warmup}").unwrap(), 100.0);
    }

    #[test]
    fn bad_output() {
        for cmd in ["echo", "echo fast", "echo 0", "echo -3", "echo 1 2", "echo inf"] {
            assert!(matches!(measure(cmd), Err(Error::Provider(_))), "{cmd}");
        }
    }

    #[test]
    fn timeout() {
        let model = crate::toy::mlp(2, &[], 2, 0);
        let sig = crate::graph::build_channel_groups(&model).unwrap().root_signature();
        let p = ExternalProvider::new("sleep 5; echo 1")
            .unwrap()
            .with_timeout(Duration::from_millis(100));
        let started = Instant::now();
        let err = p.measure(&model, &sig, &BenchmarkProtocol::FINAL).unwrap_err();
        assert!(err.to_string().contains("timed out"));
        assert!(started.elapsed() < Duration::from_secs(4));
    }

    #[test]
    fn output_parsing() {
        assert_eq!(parse_latency_output(" 3.25\n").unwrap(), 3.25);
        assert_eq!(parse_latency_output("1e-2").unwrap(), 0.01);
        assert!(parse_latency_output("NaN").is_err());
        assert!(parse_latency_output("").is_err());
    }
}
