//! Downloads and verifies the four MNIST IDX files.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use cevit::data::{self, Split};
use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

/// SHA-256 of each decompressed file.
pub const DIGESTS: [(&str, &str); 4] = [
    (
        data::TRAIN_IMAGES,
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        data::TRAIN_LABELS,
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        data::TEST_IMAGES,
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        data::TEST_LABELS,
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

/// Mirrors serving `<name>.gz`.
pub const GZ_MIRRORS: [&str; 2] = [
    "https://ossci-datasets.s3.amazonaws.com/mnist",
    "https://storage.googleapis.com/cvdf-datasets/mnist",
];

/// npm package that ships the raw files under `package/data/`.
pub const TARBALL_MIRROR: &str = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz";

#[derive(Debug)]
pub enum FetchError {
    Checksum { file: PathBuf, expected: String, found: String },
    Download(String),
    Io(std::io::Error),
    Data(cevit::Error),
}

impl std::fmt::Display for FetchError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FetchError::Checksum { file, expected, found } => write!(
                f,
                "checksum mismatch for {}: expected sha256 {expected}, found {found}",
                file.display()
            ),
            FetchError::Download(msg) => write!(f, "download failed: {msg}"),
            FetchError::Io(e) => write!(f, "{e}"),
            FetchError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for FetchError {}

impl From<std::io::Error> for FetchError {
    fn from(e: std::io::Error) -> Self {
        FetchError::Io(e)
    }
}

impl From<cevit::Error> for FetchError {
    fn from(e: cevit::Error) -> Self {
        FetchError::Data(e)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn expected_digest(name: &str) -> &'static str {
    DIGESTS.iter().find(|(n, _)| *n == name).map(|(_, d)| *d).expect("known file")
}

/// Checks the digest of `bytes` against the known value for `name`.
pub fn verify(name: &str, path: &Path, bytes: &[u8]) -> Result<(), FetchError> {
    let found = sha256_hex(bytes);
    let expected = expected_digest(name);
    if found != expected {
        return Err(FetchError::Checksum {
            file: path.to_path_buf(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Present,
    LocalGzip,
    Downloaded(String),
}

#[derive(Debug, Clone)]
pub struct FetchReport {
    pub files: Vec<(String, Source)>,
}

fn agent() -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout_connect(Duration::from_secs(15))
        .timeout_read(Duration::from_secs(120))
        .build()
}

fn get(agent: &ureq::Agent, url: &str) -> Result<Vec<u8>, String> {
    let resp = agent.get(url).call().map_err(|e| format!("{url}: {e}"))?;
    let mut buf = Vec::new();
    resp.into_reader()
        .read_to_end(&mut buf)
        .map_err(|e| format!("{url}: {e}"))?;
    Ok(buf)
}

fn gunzip(bytes: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

/// Pulls the wanted files out of the npm tarball.
fn from_tarball(bytes: &[u8], wanted: &[&str]) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut archive = tar::Archive::new(GzDecoder::new(bytes));
    let mut found = Vec::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(w) = wanted.iter().find(|w| **w == name) {
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf)?;
            // Some packagings gzip the members as well.
            if buf.starts_with(&[0x1f, 0x8b]) {
                buf = gunzip(&buf)?;
            }
            found.push((w.to_string(), buf));
        }
    }
    Ok(found)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("part");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)
}

/// Makes sure all four files exist in `dir` with the known digests.
///
/// Existing valid files are left alone; `<name>.gz` files placed next to
/// them are decompressed; anything else is downloaded (gzip mirrors first,
/// then the npm tarball). A present but corrupt file is an error rather
/// than being silently replaced.
pub fn fetch(dir: &Path, offline: bool, log: &mut dyn FnMut(&str)) -> Result<FetchReport, FetchError> {
    fs::create_dir_all(dir)?;
    let mut report = FetchReport { files: Vec::new() };
    let mut missing = Vec::new();
    for (name, _) in DIGESTS {
        let path = dir.join(name);
        let gz = dir.join(format!("{name}.gz"));
        if path.exists() {
            verify(name, &path, &fs::read(&path)?)?;
            log(&format!("{name}: present, checksum ok"));
            report.files.push((name.to_string(), Source::Present));
        } else if gz.exists() {
            let bytes = gunzip(&fs::read(&gz)?)?;
            verify(name, &gz, &bytes)?;
            write_atomic(&path, &bytes)?;
            log(&format!("{name}: decompressed from {}", gz.display()));
            report.files.push((name.to_string(), Source::LocalGzip));
        } else {
            missing.push(name);
        }
    }
    if !missing.is_empty() {
        if offline {
            return Err(FetchError::Download(format!(
                "missing {} and --offline was given",
                missing.join(", ")
            )));
        }
        let agent = agent();
        let mut errors = Vec::new();
        let mut still = Vec::new();
        'files: for name in missing {
            for base in GZ_MIRRORS {
                let url = format!("{base}/{name}.gz");
                log(&format!("{name}: trying {url}"));
                match get(&agent, &url).and_then(|b| gunzip(&b).map_err(|e| format!("{url}: {e}"))) {
                    Ok(bytes) if sha256_hex(&bytes) == expected_digest(name) => {
                        write_atomic(&dir.join(name), &bytes)?;
                        report.files.push((name.to_string(), Source::Downloaded(url)));
                        continue 'files;
                    }
                    Ok(_) => errors.push(format!("{url}: checksum mismatch")),
                    Err(e) => errors.push(e),
                }
            }
            still.push(name);
        }
        if !still.is_empty() {
            log(&format!("trying {TARBALL_MIRROR}"));
            match get(&agent, TARBALL_MIRROR) {
                Ok(tgz) => {
                    for (name, bytes) in from_tarball(&tgz, &still)? {
                        let path = dir.join(&name);
                        verify(&name, &path, &bytes)?;
                        write_atomic(&path, &bytes)?;
                        report
                            .files
                            .push((name.clone(), Source::Downloaded(TARBALL_MIRROR.to_string())));
                    }
                }
                Err(e) => errors.push(e),
            }
        }
        let absent: Vec<_> = DIGESTS
            .iter()
            .map(|(n, _)| *n)
            .filter(|n| !dir.join(n).exists())
            .collect();
        if !absent.is_empty() {
            return Err(FetchError::Download(format!(
                "could not obtain {}: {}",
                absent.join(", "),
                errors.join("; ")
            )));
        }
    }
    // Header and count validation on top of the digests.
    for split in [Split::Train, Split::Test] {
        let images = data::load_split(dir, split)?;
        log(&format!("{split:?}: {} images", images.len()));
    }
    Ok(report)
}
