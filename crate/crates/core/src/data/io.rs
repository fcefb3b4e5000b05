use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, DatasetMeta};
use crate::error::{Error, Result};
use crate::graph::{Edge, GraphSpec};
use crate::tensor::Tensor;

const VALUES: &str = "values.csv";
const INCIDENTS: &str = "incidents.csv";
const ADJACENCY: &str = "adjacency.csv";
const META: &str = "meta.json";

#[derive(Debug, Serialize, Deserialize)]
struct ValueRow {
    t: usize,
    node: usize,
    value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Acc,
    Reg,
}

#[derive(Debug, Serialize, Deserialize)]
struct IncidentRow {
    t: usize,
    node: usize,
    kind: Kind,
    code: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    src: usize,
    dst: usize,
    weight: f64,
}

fn load_err(file: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Load {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads every row of a headed CSV, passing each with its 1-based line number.
fn read_rows<R: DeserializeOwned>(
    path: &Path,
    header: &[&str],
    mut each: impl FnMut(R, u64) -> Result<()>,
) -> Result<u64> {
    let file = File::open(path).map_err(|e| load_err(path, 0, e.to_string()))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| load_err(path, 1, e.to_string()))?.clone();
    if headers.iter().ne(header.iter().copied()) {
        return Err(load_err(
            path,
            1,
            format!("expected header '{}', found '{}'", header.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut last = 1;
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(last + 1, |p| p.line());
            load_err(path, line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(last + 1, |p| p.line());
        last = line;
        let row: R = record
            .deserialize(Some(&headers))
            .map_err(|e| load_err(path, line, format!("malformed row: {e}")))?;
        each(row, line)?;
    }
    Ok(last)
}

fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| load_err(&path, 0, e.to_string()))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| load_err(&path, e.line() as u64, e.to_string()))?;
    meta.validate().map_err(|e| load_err(&path, 0, e.to_string()))?;
    Ok(meta)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let meta = load_meta(dir)?;
    let (n_steps, n) = (meta.n_steps, meta.n_nodes);

    let path = dir.join(VALUES);
    let mut values = vec![0.0; n_steps * n];
    let mut seen = vec![false; n_steps * n];
    let last = read_rows(&path, &["t", "node", "value"], |r: ValueRow, line| {
        if r.t >= n_steps || r.node >= n {
            return Err(load_err(&path, line, format!("(t={}, node={}) outside {n_steps}x{n}", r.t, r.node)));
        }
        if !r.value.is_finite() {
            return Err(load_err(&path, line, "non-finite value"));
        }
        let i = r.t * n + r.node;
        if std::mem::replace(&mut seen[i], true) {
            return Err(load_err(&path, line, format!("duplicate entry for t={}, node={}", r.t, r.node)));
        }
        values[i] = r.value;
        Ok(())
    })?;
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(load_err(&path, last, format!("missing entry for t={}, node={}", i / n, i % n)));
    }

    let path = dir.join(INCIDENTS);
    let mut acc_ids = vec![0; n_steps * n];
    let mut reg_ids = vec![0; n_steps * n];
    read_rows(&path, &["t", "node", "kind", "code"], |r: IncidentRow, line| {
        if r.t >= n_steps || r.node >= n {
            return Err(load_err(&path, line, format!("(t={}, node={}) outside {n_steps}x{n}", r.t, r.node)));
        }
        let (ids, vocab) = match r.kind {
            Kind::Acc => (&mut acc_ids, meta.acc_vocab),
            Kind::Reg => (&mut reg_ids, meta.reg_vocab),
        };
        if r.code == 0 || r.code >= vocab {
            return Err(load_err(&path, line, format!("code {} outside 1..{vocab}", r.code)));
        }
        let slot = &mut ids[r.t * n + r.node];
        if *slot != 0 {
            return Err(load_err(&path, line, "duplicate incident entry"));
        }
        *slot = r.code;
        Ok(())
    })?;

    let path = dir.join(ADJACENCY);
    let mut edges = Vec::new();
    let last = read_rows(&path, &["src", "dst", "weight"], |r: EdgeRow, line| {
        if r.src >= n || r.dst >= n {
            return Err(load_err(&path, line, format!("edge ({}, {}) outside 0..{n}", r.src, r.dst)));
        }
        edges.push(Edge {
            src: r.src,
            dst: r.dst,
            weight: r.weight,
        });
        Ok(())
    })?;
    let graph = GraphSpec::new(n, edges).map_err(|e| load_err(&path, last, e.to_string()))?;

    let values = Tensor::new(vec![n_steps, n], values)?;
    DatasetBundle::new(meta, values, acc_ids, reg_ids, graph)
}

fn create(path: PathBuf) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(File::create(path)?))
}

/// Writes the four dataset files into `dir`, creating it if needed.
pub fn save_dataset(dir: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    let n = bundle.n_nodes();

    let mut w = create(dir.join(VALUES))?;
    w.write_record(["t", "node", "value"])?;
    for (i, &value) in bundle.values.data().iter().enumerate() {
        w.serialize(ValueRow {
            t: i / n,
            node: i % n,
            value,
        })?;
    }
    w.flush()?;

    let mut w = create(dir.join(INCIDENTS))?;
    w.write_record(["t", "node", "kind", "code"])?;
    for i in 0..bundle.acc_ids.len() {
        for (kind, code) in [(Kind::Acc, bundle.acc_ids[i]), (Kind::Reg, bundle.reg_ids[i])] {
            if code != 0 {
                w.serialize(IncidentRow {
                    t: i / n,
                    node: i % n,
                    kind,
                    code,
                })?;
            }
        }
    }
    w.flush()?;

    let mut w = create(dir.join(ADJACENCY))?;
    w.write_record(["src", "dst", "weight"])?;
    for e in bundle.graph.edges() {
        w.serialize(EdgeRow {
            src: e.src,
            dst: e.dst,
            weight: e.weight,
        })?;
    }
    w.flush()?;

    let mut meta = serde_json::to_string_pretty(&bundle.meta)?;
    meta.push('\n');
    fs::write(dir.join(META), meta)?;
    Ok(())
}
