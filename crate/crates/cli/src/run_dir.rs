use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::RunConfig;
use crate::error::Category;

pub const CONFIG_FILE: &str = "config.toml";

/// `<root>/<command>-<UTC timestamp>-<config hash>`, with the resolved
/// config written inside. A numeric suffix avoids collisions within one
/// second.
pub fn create(root: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{command}-{stamp}-{}", cfg.short_hash()?);
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))
        .context(Category::Io)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)
        .with_context(|| format!("writing {}", dir.join(CONFIG_FILE).display()))
        .context(Category::Io)?;
    Ok(dir)
}

/// Fails with a resolution error naming `path` when it does not exist.
pub fn require(path: Option<&Path>, what: &str) -> Result<PathBuf> {
    let path = path
        .with_context(|| format!("no {what} given"))
        .context(Category::Resolution)?;
    if !path.exists() {
        return Err(anyhow::anyhow!("{what} {} not found", path.display())).context(Category::Resolution);
    }
    Ok(path.to_path_buf())
}
