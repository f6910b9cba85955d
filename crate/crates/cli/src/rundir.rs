//! Run directories and the log that goes with them.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::{Context, Result};

static LOGGING: AtomicBool = AtomicBool::new(false);

pub fn logging_active() -> bool {
    LOGGING.load(Ordering::Relaxed)
}

/// Creates `<root>/<timestamp>-seed<seed>-<verb>`, adding a numeric suffix
/// if two runs land in the same second.
pub fn create(root: &Path, verb: &str, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{seed}-{verb}");
    fs::create_dir_all(root).with_context(|| format!("creating run root {}", root.display()))?;
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

struct Tee {
    file: File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stderr().flush()?;
        self.file.flush()
    }
}

/// Logs to stderr and `<dir>/run.log`. Lines carry no timestamps so logs of
/// identical runs compare equal.
pub fn init_logging(dir: &Path, level: log::LevelFilter) -> Result<()> {
    let path = dir.join("run.log");
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format(|buf, rec| writeln!(buf, "[{:<5}] {}", rec.level(), rec.args()))
        .target(env_logger::Target::Pipe(Box::new(Tee { file })))
        .try_init()?;
    LOGGING.store(true, Ordering::Relaxed);
    Ok(())
}

pub fn write(dir: &Path, name: &str, body: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
