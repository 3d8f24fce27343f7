//! Running recipe scripts and checks in a sanitized environment.
//!
//! Children start from an empty environment: only the bindings handed in
//! plus a minimal `PATH` are visible. Output goes to the job log. A timeout
//! kills the child's whole process group.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use wait_timeout::ChildExt;

pub const MINIMAL_PATH: &str = "/usr/local/bin:/usr/bin:/bin";
pub const SHELL: &str = "/bin/sh";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptStatus {
    Exited(i32),
    Signaled(i32),
    TimedOut(Duration),
}

impl ScriptStatus {
    pub fn success(&self) -> bool {
        matches!(self, ScriptStatus::Exited(0))
    }
}

impl fmt::Display for ScriptStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScriptStatus::Exited(c) => write!(f, "exit status {c}"),
            ScriptStatus::Signaled(s) => write!(f, "killed by signal {s}"),
            ScriptStatus::TimedOut(d) => write!(f, "timed out after {}s", d.as_secs()),
        }
    }
}

/// How a check or script is started.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Invocation {
    /// `/bin/sh <script>`; recipe scripts need not carry an exec bit.
    Shell(PathBuf),
    /// A program run directly.
    Exec(PathBuf),
}

impl Invocation {
    pub fn path(&self) -> &Path {
        match self {
            Invocation::Shell(p) | Invocation::Exec(p) => p,
        }
    }
}

/// Runs `what` in `cwd` with exactly `env` (plus `PATH` if absent),
/// appending its stdout and stderr to `log`.
pub fn run(
    what: &Invocation,
    cwd: &Path,
    env: &BTreeMap<String, String>,
    log: &mut File,
    timeout: Duration,
) -> io::Result<ScriptStatus> {
    let mut cmd = match what {
        Invocation::Shell(script) => {
            let mut c = Command::new(SHELL);
            c.arg(script);
            c
        }
        Invocation::Exec(program) => Command::new(program),
    };
    cmd.current_dir(cwd)
        .env_clear()
        .env("PATH", MINIMAL_PATH)
        .envs(env)
        .stdin(Stdio::null())
        .stdout(log.try_clone()?)
        .stderr(log.try_clone()?)
        .process_group(0);
    writeln!(log, "+ {}", what.path().display())?;
    let mut child = cmd.spawn()?;
    let status = match child.wait_timeout(timeout)? {
        Some(status) => status,
        None => {
            // SAFETY: the child leads its own process group (process_group(0)).
            unsafe {
                libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
            }
            child.wait()?;
            writeln!(log, "! timed out after {}s", timeout.as_secs())?;
            return Ok(ScriptStatus::TimedOut(timeout));
        }
    };
    let out = match (status.code(), status.signal()) {
        (Some(c), _) => ScriptStatus::Exited(c),
        (None, Some(s)) => ScriptStatus::Signaled(s),
        (None, None) => ScriptStatus::Exited(-1),
    };
    if !out.success() {
        writeln!(log, "! {out}")?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::time::Instant;
    use tempfile::TempDir;

    fn script(dir: &Path, body: &str) -> Invocation {
        let p = dir.join("s.sh");
        fs::write(&p, body).unwrap();
        Invocation::Shell(p)
    }

    #[test]
    fn environment_is_sanitized() {
        std::env::set_var("RADE_TEST_LEAK", "leaked");
        let tmp = TempDir::new().unwrap();
        let log_path = tmp.path().join("log");
        let mut log = File::create(&log_path).unwrap();
        let s = script(tmp.path(), "env | sort\n");
        let env = BTreeMap::from([("ARCH".to_string(), "x86_64".to_string())]);
        let st = run(&s, tmp.path(), &env, &mut log, Duration::from_secs(10)).unwrap();
        assert!(st.success());
        let out = fs::read_to_string(&log_path).unwrap();
        assert!(out.contains("ARCH=x86_64"));
        assert!(out.contains(&format!("PATH={MINIMAL_PATH}")));
        assert!(!out.contains("RADE_TEST_LEAK"));
        assert!(!out.contains("HOME="));
    }

    #[test]
    fn exit_codes_and_timeouts() {
        let tmp = TempDir::new().unwrap();
        let mut log = File::create(tmp.path().join("log")).unwrap();
        let env = BTreeMap::new();
        let st = run(&script(tmp.path(), "exit 3\n"), tmp.path(), &env, &mut log, Duration::from_secs(10)).unwrap();
        assert_eq!(st, ScriptStatus::Exited(3));

        let start = Instant::now();
        let st = run(&script(tmp.path(), "sleep 30 & sleep 30\n"), tmp.path(), &env, &mut log, Duration::from_millis(300))
            .unwrap();
        assert!(matches!(st, ScriptStatus::TimedOut(_)));
        assert!(start.elapsed() < Duration::from_secs(10));
    }
}
