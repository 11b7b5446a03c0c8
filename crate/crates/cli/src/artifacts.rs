//! Artifact directories: every output file is written atomically and
//! hashed into a manifest next to the resolved config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use breathae::dataset::{write_atomic, LabeledDataset};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.txt";
pub const SEED_FILE: &str = "seed.txt";
pub const HASHES_FILE: &str = "hashes.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::io(path, e)
        }
    })
}

pub fn dataset_bytes(ds: &LabeledDataset, binary: bool) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    if binary {
        ds.write_binary(&mut buf)?;
    } else {
        ds.write_text(&mut buf)?;
    }
    Ok(buf)
}

/// Reads a dataset and returns it with the hash of its file contents.
pub fn load_dataset(path: &Path) -> CliResult<(LabeledDataset, String)> {
    let bytes = read_file(path)?;
    let hash = sha256_hex(&bytes);
    let ds = if path.extension().is_some_and(|e| e == "bin") {
        LabeledDataset::read_binary(bytes.as_slice())?
    } else {
        LabeledDataset::read_text(bytes.as_slice())?
    };
    Ok((ds, hash))
}

#[derive(Debug)]
pub struct ArtifactDir {
    root: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl ArtifactDir {
    /// Creates `root` and writes the resolved config and seed.
    pub fn create(root: &Path, cfg: &RunConfig) -> CliResult<Self> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let mut dir = Self { root: root.to_path_buf(), inputs: BTreeMap::new(), outputs: BTreeMap::new() };
        dir.write(CONFIG_FILE, cfg.to_text().as_bytes())?;
        dir.write(SEED_FILE, format!("{}\n", cfg.seed).as_bytes())?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn record_input(&mut self, label: &str, hash: String) {
        self.inputs.insert(label.to_string(), hash);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        write_atomic(&path, bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_dataset(&mut self, stem: &str, ds: &LabeledDataset, binary: bool) -> CliResult<PathBuf> {
        let name = format!("{stem}.{}", if binary { "bin" } else { "csv" });
        self.write(&name, &dataset_bytes(ds, binary)?)
    }

    /// Writes the hash manifest; call once all outputs exist.
    pub fn finish(self) -> CliResult<PathBuf> {
        let mut s = String::from("role,name,sha256\n");
        for (k, v) in &self.inputs {
            s.push_str(&format!("input,{k},{v}\n"));
        }
        for (k, v) in &self.outputs {
            s.push_str(&format!("output,{k},{v}\n"));
        }
        let path = self.path(HASHES_FILE);
        write_atomic(&path, s.as_bytes())?;
        Ok(self.root)
    }
}

/// Python script that renders every CSV of an artifact directory.
pub const PLOT_SCRIPT: &str = r#"import csv, pathlib, sys
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

root = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else pathlib.Path(__file__).parent)

def rows(name):
    with open(root / name) as f:
        return list(csv.DictReader(f))

def save(fig, name):
    fig.tight_layout()
    fig.savefig(root / name, dpi=120)
    plt.close(fig)

if (root / "training_log.csv").exists():
    log = rows("training_log.csv")
    keys = [k for k in log[0] if k != "epoch"]
    fig, axes = plt.subplots(len(keys), 1, figsize=(7, 2 * len(keys)), sharex=True)
    ep = [int(r["epoch"]) for r in log]
    for ax, k in zip(axes, keys):
        ax.plot(ep, [float(r[k]) for r in log])
        ax.set_ylabel(k, fontsize=7)
    save(fig, "training_log.png")

for name in ("neighbor_distances.csv", "latent_norms_encodings.csv", "latent_norms_prior.csv"):
    if (root / name).exists():
        h = rows(name)
        fig, ax = plt.subplots(figsize=(6, 3))
        lo = [float(r["lo"]) for r in h]
        ax.bar(lo, [int(r["count"]) for r in h], width=(lo[1] - lo[0]) if len(lo) > 1 else 1, align="edge")
        ax.set_title(name)
        save(fig, name.replace(".csv", ".png"))

if (root / "latent_grid.csv").exists():
    cells = {}
    for r in rows("latent_grid.csv"):
        cells.setdefault((float(r["z0"]), float(r["z1"])), []).append(float(r["a_ee"]))
    fig, ax = plt.subplots(figsize=(6, 6))
    step = min(abs(a - b) for a in {k[0] for k in cells} for b in {k[0] for k in cells} if a != b) if len(cells) > 1 else 1.0
    for (z0, z1), ys in cells.items():
        span = (max(ys) - min(ys)) or 1.0
        xs = [z0 + 0.8 * step * i / max(len(ys) - 1, 1) for i in range(len(ys))]
        ax.plot(xs, [z1 + 0.4 * step * (y - min(ys)) / span for y in ys], lw=0.6)
    ax.set_xlabel("z0")
    ax.set_ylabel("z1")
    save(fig, "latent_grid.png")

if (root / "series.csv").exists():
    s = rows("series.csv")
    fig, ax = plt.subplots(figsize=(9, 3))
    first = s[0]["sample"]
    sel = [r for r in s if r["sample"] == first]
    for k in sel[0]:
        if k not in ("sample", "t"):
            ax.plot([float(r["t"]) for r in sel], [float(r[k]) for r in sel], label=k, lw=0.8)
    ax.legend()
    save(fig, "series.png")
"#;
