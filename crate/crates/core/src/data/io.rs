//! Series CSV and manifest files.
//!
//! A series file has one row per time step and one column per channel, with
//! an optional header row. A manifest lists series files:
//!
//! ```text
//! WARPADA-MANIFEST v1
//! channels=1
//! length=128
//! classes=c0,c1,c2
//! path,domain,label
//! series/000000.csv,source,c0
//! ```
//!
//! Paths are relative to the manifest's directory. Labels are mapped to
//! dense ids in the order of the `classes` line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset};
use crate::signal::TimeSeries;
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "WARPADA-MANIFEST v1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a `[channels × len]` series from CSV.
pub fn read_series_csv(path: &Path, channels: usize, len: usize) -> Result<Tensor, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => DataError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => DataError::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(len);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(vals) => {
                if vals.len() != channels {
                    return Err(DataError::Parse {
                        path: path.to_path_buf(),
                        line,
                        msg: format!("expected {channels} columns, found {}", vals.len()),
                    });
                }
                if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
                    return Err(DataError::Parse {
                        path: path.to_path_buf(),
                        line,
                        msg: format!("non-finite value {v}"),
                    });
                }
                rows.push(vals);
            }
            Err(_) if i == 0 => {} // header row
            Err(e) => {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("not a number: {e}"),
                })
            }
        }
    }
    if rows.len() != len {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: rows.len() as u64,
            msg: format!("expected {len} rows, found {}", rows.len()),
        });
    }
    let mut data = vec![0.0; channels * len];
    for (t, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            data[c * len + t] = *v;
        }
    }
    Tensor::new([channels, len], data).map_err(|e| DataError::Invalid(e.to_string()))
}

/// Writes a series as CSV with a `ch0,ch1,…` header and 12 significant digits.
pub fn write_series_csv(path: &Path, series: &TimeSeries) -> Result<(), DataError> {
    let mut out = String::with_capacity(series.values().len() * 20);
    let header: Vec<String> = (0..series.channels()).map(|c| format!("ch{c}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..series.len() {
        for c in 0..series.channels() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.11e}", series.channel(c)[t]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

struct ManifestHead {
    channels: Option<usize>,
    length: Option<usize>,
    classes: Option<Vec<String>>,
}

/// Loads and validates every series listed in a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let perr = |line: usize, msg: String| DataError::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        msg,
    };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, MANIFEST_HEADER)) => {}
        _ => return Err(perr(1, format!("expected header line {MANIFEST_HEADER:?}"))),
    }
    let mut head = ManifestHead {
        channels: None,
        length: None,
        classes: None,
    };
    let mut in_entries = false;
    let mut entries: Vec<(usize, PathBuf, String, usize)> = Vec::new();
    for (no, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_entries {
            if line == "path,domain,label" {
                in_entries = true;
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(no, format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<usize>().map_err(|e| perr(no, format!("{k}: {e}")));
            match k {
                "channels" => head.channels = Some(num(v)?),
                "length" => head.length = Some(num(v)?),
                "classes" => {
                    head.classes = Some(v.split(',').map(|s| s.trim().to_string()).collect());
                }
                other => return Err(perr(no, format!("unknown manifest key {other:?}"))),
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [file, domain, label] = fields[..] else {
            return Err(perr(no, format!("expected 3 fields, found {}", fields.len())));
        };
        let classes = head
            .classes
            .as_ref()
            .ok_or_else(|| perr(no, "classes must be declared before entries".into()))?;
        let id = classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| DataError::UnknownLabel {
                path: path.to_path_buf(),
                line: no as u64,
                label: label.to_string(),
            })?;
        entries.push((no, base.join(file), domain.to_string(), id));
    }
    let (Some(channels), Some(length), Some(classes)) = (head.channels, head.length, head.classes) else {
        return Err(perr(1, "manifest must declare channels, length and classes".into()));
    };
    if !in_entries {
        return Err(perr(1, "missing entry header line \"path,domain,label\"".into()));
    }
    let mut samples = Vec::with_capacity(entries.len());
    for (no, file, domain, label) in entries {
        if !file.is_file() {
            return Err(DataError::MissingFile {
                path: path.to_path_buf(),
                line: no as u64,
                file,
            });
        }
        let values = read_series_csv(&file, channels, length)?;
        let s = TimeSeries::new(values, label, domain).map_err(|e| DataError::Invalid(e.to_string()))?;
        samples.push(s);
    }
    Dataset::new(samples, classes)
}

/// Writes every sample of `ds` under `dir/<subdir>/` and a manifest at
/// `dir/<name>.manifest`. Returns the manifest path.
pub fn write_dataset(dir: &Path, name: &str, ds: &Dataset) -> Result<PathBuf, DataError> {
    let sub = dir.join(name);
    fs::create_dir_all(&sub).map_err(io_err(&sub))?;
    let (channels, length) = ds
        .sample_shape()
        .ok_or_else(|| DataError::Invalid("cannot write an empty dataset".into()))?;
    let mut manifest = format!(
        "{MANIFEST_HEADER}\nchannels={channels}\nlength={length}\nclasses={}\npath,domain,label\n",
        ds.class_names().join(",")
    );
    for (i, s) in ds.samples().iter().enumerate() {
        let rel = format!("{name}/{i:06}.csv");
        write_series_csv(&dir.join(&rel), s)?;
        manifest.push_str(&format!("{rel},{},{}\n", s.domain_tag, ds.class_names()[s.label]));
    }
    let mpath = dir.join(format!("{name}.manifest"));
    let mut f = fs::File::create(&mpath).map_err(io_err(&mpath))?;
    f.write_all(manifest.as_bytes()).map_err(io_err(&mpath))?;
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn two_file_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let rows: String = (0..8).map(|i| format!("{i}\n")).collect();
        write(dir.path(), "a.csv", &format!("value\n{rows}"));
        write(dir.path(), "b.csv", &rows);
        let m = write(
            dir.path(),
            "m.manifest",
            "WARPADA-MANIFEST v1\nchannels=1\nlength=8\nclasses=x,y\npath,domain,label\na.csv,src,y\nb.csv,src,x\n",
        );
        let ds = load_manifest(&m).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), vec![1, 0]);
        assert_eq!(ds.samples()[0].channel(0)[7], 7.0);
    }

    #[test]
    fn ragged_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.csv", "ch0,ch1\n1,2\n3,4\n5\n6,7\n");
        let err = read_series_csv(&p, 2, 4).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("{other}"),
        }
        assert!(err_string(&p).contains(":4:"));
    }

    fn err_string(p: &Path) -> String {
        read_series_csv(p, 2, 4).unwrap_err().to_string()
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", "1\n2\n");
        let unknown = write(
            dir.path(),
            "u.manifest",
            "WARPADA-MANIFEST v1\nchannels=1\nlength=2\nclasses=x\npath,domain,label\na.csv,src,zzz\n",
        );
        assert!(matches!(load_manifest(&unknown), Err(DataError::UnknownLabel { line: 6, .. })));
        let missing = write(
            dir.path(),
            "m.manifest",
            "WARPADA-MANIFEST v1\nchannels=1\nlength=2\nclasses=x\npath,domain,label\nnope.csv,src,x\n",
        );
        assert!(matches!(load_manifest(&missing), Err(DataError::MissingFile { line: 6, .. })));
        let wrong_len = write(
            dir.path(),
            "l.manifest",
            "WARPADA-MANIFEST v1\nchannels=1\nlength=3\nclasses=x\npath,domain,label\na.csv,src,x\n",
        );
        assert!(matches!(load_manifest(&wrong_len), Err(DataError::Parse { .. })));
        let no_header = write(dir.path(), "h.manifest", "channels=1\n");
        assert!(load_manifest(&no_header).is_err());
    }

    #[test]
    fn dataset_roundtrip_precision() {
        let dir = tempfile::tempdir().unwrap();
        let xs: Vec<TimeSeries> = (0..3)
            .map(|k| {
                let v = (0..20).map(|i| ((i * 7 + k) as f64 * 0.37).sin() * 3.3 + 1e-3 * k as f64).collect();
                TimeSeries::new(Tensor::matrix(2, 10, v), k % 2, "dom").unwrap()
            })
            .collect();
        let ds = Dataset::with_class_count(xs, 2).unwrap();
        let m = write_dataset(dir.path(), "set", &ds).unwrap();
        let back = load_manifest(&m).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in ds.samples().iter().zip(back.samples()) {
            assert_eq!(a.domain_tag, b.domain_tag);
            for (x, y) in a.values().data().iter().zip(b.values().data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
