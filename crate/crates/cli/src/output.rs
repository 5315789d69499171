//! Report emission as CSV or JSON.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::{Format, OutputArgs};

#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    config: &'a C,
    rows: &'a [R],
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".config.json");
    PathBuf::from(name)
}

fn open(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

/// Writes `rows` with the resolved `config`. JSON embeds the config; CSV
/// files get it in a `.config.json` sidecar.
pub fn emit<C: Serialize, R: Serialize>(out: &OutputArgs, config: &C, rows: &[R]) -> Result<()> {
    let path = out.output.as_deref();
    match out.format {
        Format::Json => {
            let mut w = open(path)?;
            serde_json::to_writer_pretty(&mut w, &Report { config, rows })?;
            writeln!(w)?;
            w.flush()?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(open(path)?);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            let cfg = serde_json::to_string_pretty(config)?;
            match path {
                Some(p) => {
                    let side = sidecar(p);
                    std::fs::write(&side, cfg + "\n").with_context(|| format!("cannot create {}", side.display()))?;
                }
                None => log::info!("resolved config: {cfg}"),
            }
        }
    }
    Ok(())
}
