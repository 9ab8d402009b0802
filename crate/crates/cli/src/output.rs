use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

/// Output directory that remembers every file written into it.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    seed: u64,
    files: &'a [String],
}

impl OutputDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write_file<F>(&mut self, name: &str, body: F) -> entcal::Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> entcal::Result<()>,
    {
        let mut w = BufWriter::new(File::create(self.root.join(name))?);
        body(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> entcal::Result<()> {
        self.write_file(name, |w| Ok(w.write_all(bytes)?))
    }

    /// Writes `manifest.json` listing every file produced, itself included.
    pub fn finish(mut self, subcommand: &str, seed: u64) -> entcal::Result<()> {
        self.files.push("manifest.json".to_string());
        let manifest = Manifest {
            subcommand,
            seed,
            files: &self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(self.root.join("manifest.json"), text)?;
        Ok(())
    }
}
