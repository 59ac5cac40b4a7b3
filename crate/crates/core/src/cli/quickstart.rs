use std::path::{Path, PathBuf};

use crate::corpus::{demo, write_lines};
use crate::error::{Error, Result};

use super::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuickstartFiles {
    pub corpus: PathBuf,
    pub config: PathBuf,
    pub script: PathBuf,
}

const SCRIPT: &str = r#"#!/bin/sh
# Standard vs occlusion pretraining on the bundled corpus, five seeds each.
# Set OCCLM to the binary path if it is not on PATH.
set -eu
cd "$(dirname "$0")"
OCCLM=${OCCLM:-occlm}

$OCCLM corpus clean --input corpus/desk.txt --out data/clean.txt
$OCCLM corpus split --input data/clean.txt --out data --seed 0
$OCCLM tokenizer train --input data/train.txt --config config.toml --out tok

for seed in 1 2 3 4 5; do
  $OCCLM pretrain --config config.toml --data data --vocab tok/vocab.txt \
    --objective standard --seed "$seed" --out "runs/p0.0-seed$seed"
  for p in 0.1 0.3 0.5; do
    $OCCLM pretrain --config config.toml --data data --vocab tok/vocab.txt \
      --objective occlusion --occlusion-prob "$p" --seed "$seed" --out "runs/p$p-seed$seed"
  done
done

echo "best validation loss per run:"
for f in runs/*/summary.json; do
  printf '%s\t%s\n' "$(dirname "$f")" "$(grep best_valid_loss "$f" | tr -dc '0-9.')"
done
"#;

/// Writes the raw bundled corpus, the desk-scale config and a script that
/// runs the paired comparison. Existing files are kept unless `force`.
pub fn quickstart(out: &Path, force: bool) -> Result<QuickstartFiles> {
    let files = QuickstartFiles {
        corpus: out.join("corpus").join("desk.txt"),
        config: out.join("config.toml"),
        script: out.join("run.sh"),
    };
    if !force {
        if let Some(p) = [&files.corpus, &files.config, &files.script].into_iter().find(|p| p.exists()) {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    let dir = out.join("corpus");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_lines(&files.corpus, &demo::desk_corpus())?;
    let mut cfg = RunConfig::default().to_toml()?;
    cfg.insert_str(0, "# Desk-scale setup. Flags passed to occlm override these values.\n");
    std::fs::write(&files.config, cfg).map_err(|e| Error::io(&files.config, e))?;
    std::fs::write(&files.script, SCRIPT).map_err(|e| Error::io(&files.script, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let perms = std::fs::Permissions::from_mode(0o755);
        std::fs::set_permissions(&files.script, perms).map_err(|e| Error::io(&files.script, e))?;
    }
    Ok(files)
}
