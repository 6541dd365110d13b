//! Versioned binary file formats and CSV writers.
//!
//! Every binary file starts with an 8-byte magic string and a `u32`
//! format version; all integers and floats are little-endian, floats
//! are 64-bit. Readers refuse unknown magics/versions and report the
//! byte offset of the first inconsistency, and a partial read never
//! produces a value.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::operator::{Dataset, DatasetRecord, Mlp, OperatorModel, TargetVariant};
use crate::plant::Trajectory;

pub const MODEL_MAGIC: &[u8; 8] = b"GSNOMODL";
pub const DATASET_MAGIC: &[u8; 8] = b"GSNODSET";
pub const SNAPSHOT_MAGIC: &[u8; 8] = b"GSNOSNAP";
pub const KERNEL_MAGIC: &[u8; 8] = b"GSNOKTAB";
pub const FORMAT_VERSION: u32 = 1;

// ----- primitive little-endian cursor ---------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn fail(&self, what: &str) -> Error {
        Error::Format(format!("{what} at byte offset {}", self.pos))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(&format!("truncated file reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != expect {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {v}, this build reads {FORMAT_VERSION}"
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "u64")?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail("count overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, "f64")?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let bytes = self.take(8 * n, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn usize_vec(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.usize()?;
        let bytes = self.take(8 * n, what)?;
        bytes
            .chunks_exact(8)
            .map(|c| {
                usize::try_from(u64::from_le_bytes(c.try_into().unwrap()))
                    .map_err(|_| self.fail(what))
            })
            .collect()
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after offset {}",
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_vec(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }

    fn usize_vec(&mut self, v: &[usize]) {
        self.usize(v.len());
        for &x in v {
            self.u64(x as u64);
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    // Write to a sibling temp file first so a failed write never
    // leaves a truncated artifact behind.
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ----- model ----------------------------------------------------------

fn put_mlp(w: &mut Writer, net: &Mlp) {
    w.usize_vec(&net.widths);
    for lw in &net.weights {
        w.f64_vec(lw);
    }
    for lb in &net.biases {
        w.f64_vec(lb);
    }
}

fn get_mlp(r: &mut Reader) -> Result<Mlp> {
    let widths = r.usize_vec("layer widths")?;
    if widths.len() < 2 {
        return Err(r.fail("network needs at least 2 layer widths"));
    }
    let n_layers = widths.len() - 1;
    let mut weights = Vec::with_capacity(n_layers);
    let mut biases = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let v = r.f64_vec("weights")?;
        if v.len() != widths[li] * widths[li + 1] {
            return Err(r.fail("weight blob does not match the shape table"));
        }
        weights.push(v);
    }
    for li in 0..n_layers {
        let v = r.f64_vec("biases")?;
        if v.len() != widths[li + 1] {
            return Err(r.fail("bias blob does not match the shape table"));
        }
        biases.push(v);
    }
    Ok(Mlp {
        widths,
        weights,
        biases,
    })
}

pub fn model_to_bytes(model: &OperatorModel) -> Vec<u8> {
    let mut w = Writer::new(MODEL_MAGIC);
    w.u8(model.variant.tag());
    w.usize(model.p);
    w.u64(model.seed);
    w.f64_vec(&model.sensor_xs);
    put_mlp(&mut w, &model.branch);
    put_mlp(&mut w, &model.trunk);
    w.f64_vec(&model.input_mean);
    w.f64_vec(&model.input_scale);
    w.f64_vec(&model.output_mean);
    w.f64_vec(&model.output_scale);
    w.buf
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<OperatorModel> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    r.version()?;
    let variant = TargetVariant::from_tag(r.u8()?)?;
    let p = r.usize()?;
    let seed = r.u64()?;
    let sensor_xs = r.f64_vec("sensor points")?;
    let branch = get_mlp(&mut r)?;
    let trunk = get_mlp(&mut r)?;
    let input_mean = r.f64_vec("input mean")?;
    let input_scale = r.f64_vec("input scale")?;
    let output_mean = r.f64_vec("output mean")?;
    let output_scale = r.f64_vec("output scale")?;
    r.done()?;
    let m = sensor_xs.len();
    if branch.widths[0] != m
        || input_mean.len() != m
        || input_scale.len() != m
        || *branch.widths.last().unwrap() != p * variant.n_targets()
        || *trunk.widths.last().unwrap() != p
        || output_mean.len() != variant.n_targets()
        || output_scale.len() != variant.n_targets()
    {
        return Err(Error::Format("model fields are mutually inconsistent".into()));
    }
    Ok(OperatorModel {
        sensor_xs,
        branch,
        trunk,
        p,
        variant,
        input_mean,
        input_scale,
        output_mean,
        output_scale,
        seed,
    })
}

pub fn save_model(model: &OperatorModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_bytes(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<OperatorModel> {
    model_from_bytes(&std::fs::read(path)?)
}

// ----- dataset --------------------------------------------------------

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC);
    w.u8(ds.variant.tag());
    w.u64(ds.seed);
    w.f64(ds.gamma_range.0);
    w.f64(ds.gamma_range.1);
    w.f64(ds.nu_range.0);
    w.f64(ds.nu_range.1);
    w.usize(ds.dropped);
    w.f64_vec(&ds.sensor_xs);
    w.f64_vec(&ds.query_xs);
    w.usize_vec(&ds.train_idx);
    w.usize_vec(&ds.test_idx);
    w.usize(ds.records.len());
    for rec in &ds.records {
        w.f64(rec.gamma);
        w.f64(rec.nu);
        w.f64_vec(&rec.beta);
        w.usize(rec.targets.len());
        for t in &rec.targets {
            w.f64_vec(t);
        }
    }
    w.buf
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version()?;
    let variant = TargetVariant::from_tag(r.u8()?)?;
    let seed = r.u64()?;
    let gamma_range = (r.f64()?, r.f64()?);
    let nu_range = (r.f64()?, r.f64()?);
    let dropped = r.usize()?;
    let sensor_xs = r.f64_vec("sensor points")?;
    let query_xs = r.f64_vec("query points")?;
    let train_idx = r.usize_vec("train split")?;
    let test_idx = r.usize_vec("test split")?;
    let n_records = r.usize()?;
    let mut records = Vec::with_capacity(n_records.min(1 << 24));
    for _ in 0..n_records {
        let gamma = r.f64()?;
        let nu = r.f64()?;
        let beta = r.f64_vec("beta samples")?;
        let nt = r.usize()?;
        if nt != variant.n_targets() {
            return Err(r.fail("record target count does not match the variant"));
        }
        let mut targets = Vec::with_capacity(nt);
        for _ in 0..nt {
            let t = r.f64_vec("target slice")?;
            if t.len() != query_xs.len() {
                return Err(r.fail("target slice length does not match the query grid"));
            }
            targets.push(t);
        }
        if beta.len() != sensor_xs.len() {
            return Err(r.fail("beta slice length does not match the sensor grid"));
        }
        records.push(DatasetRecord {
            gamma,
            nu,
            beta,
            targets,
        });
    }
    r.done()?;
    if train_idx.iter().chain(&test_idx).any(|&i| i >= records.len()) {
        return Err(Error::Format("split index out of range".into()));
    }
    Ok(Dataset {
        variant,
        sensor_xs,
        query_xs,
        records,
        train_idx,
        test_idx,
        seed,
        gamma_range,
        nu_range,
        dropped,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &dataset_to_bytes(ds))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_bytes(&std::fs::read(path)?)
}

// ----- trajectory snapshots and CSV ------------------------------------

/// Full-field snapshots: header + row-major `n_times x n` floats.
pub fn snapshots_to_bytes(traj: &Trajectory) -> Vec<u8> {
    let mut w = Writer::new(SNAPSHOT_MAGIC);
    w.usize(traj.grid.n());
    w.usize(traj.snapshots.len());
    w.f64(traj.grid.dx());
    w.f64(traj.dt);
    w.f64_vec(&traj.times);
    for snap in &traj.snapshots {
        for &v in snap {
            w.f64(v);
        }
    }
    w.buf
}

/// Parsed snapshot payload (times and fields; the scalar header values
/// are returned alongside).
pub struct SnapshotFile {
    pub n: usize,
    pub dx: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub fields: Vec<Vec<f64>>,
}

pub fn snapshots_from_bytes(bytes: &[u8]) -> Result<SnapshotFile> {
    let mut r = Reader::new(bytes);
    r.magic(SNAPSHOT_MAGIC)?;
    r.version()?;
    let n = r.usize()?;
    let n_times = r.usize()?;
    let dx = r.f64()?;
    let dt = r.f64()?;
    let times = r.f64_vec("time stamps")?;
    if times.len() != n_times {
        return Err(r.fail("time stamp count does not match the header"));
    }
    let mut fields = Vec::with_capacity(n_times.min(1 << 24));
    for _ in 0..n_times {
        let mut row = Vec::with_capacity(n);
        for _ in 0..n {
            row.push(r.f64()?);
        }
        fields.push(row);
    }
    r.done()?;
    Ok(SnapshotFile {
        n,
        dx,
        dt,
        times,
        fields,
    })
}

/// Scalar time series of a run: one row per recorded step.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut s = String::from("# termination=");
    s.push_str(traj.termination.label());
    s.push('\n');
    s.push_str("t,control,trace,omega\n");
    for i in 0..traj.times.len() {
        s.push_str(&format!(
            "{:.9e},{:.9e},{:.9e},{:.9e}\n",
            traj.times[i], traj.controls[i], traj.traces[i], traj.omegas[i]
        ));
    }
    s
}

// ----- kernel field dumps ----------------------------------------------

/// A rectangular field over an `(x, nu)` grid, for offline heatmaps.
pub struct KernelField {
    pub name: String,
    /// Row-major `[nu][x]`.
    pub values: Vec<f64>,
}

pub struct KernelTableFile {
    pub xs: Vec<f64>,
    pub nus: Vec<f64>,
    pub fields: Vec<KernelField>,
}

pub fn kernel_table_to_bytes(t: &KernelTableFile) -> Vec<u8> {
    let mut w = Writer::new(KERNEL_MAGIC);
    w.f64_vec(&t.xs);
    w.f64_vec(&t.nus);
    w.usize(t.fields.len());
    for f in &t.fields {
        let name = f.name.as_bytes();
        w.usize(name.len());
        w.buf.extend_from_slice(name);
        w.f64_vec(&f.values);
    }
    w.buf
}

pub fn kernel_table_from_bytes(bytes: &[u8]) -> Result<KernelTableFile> {
    let mut r = Reader::new(bytes);
    r.magic(KERNEL_MAGIC)?;
    r.version()?;
    let xs = r.f64_vec("x grid")?;
    let nus = r.f64_vec("nu grid")?;
    let n_fields = r.usize()?;
    let cells = xs.len() * nus.len();
    let mut fields = Vec::with_capacity(n_fields.min(64));
    for _ in 0..n_fields {
        let len = r.usize()?;
        let name = String::from_utf8(r.take(len, "field name")?.to_vec())
            .map_err(|_| Error::Format("field name is not UTF-8".into()))?;
        let values = r.f64_vec("field values")?;
        if values.len() != cells {
            return Err(r.fail("field size does not match the grids"));
        }
        fields.push(KernelField { name, values });
    }
    r.done()?;
    Ok(KernelTableFile { xs, nus, fields })
}

/// Per-epoch training metrics CSV.
pub fn metrics_to_csv(history: &[crate::operator::EpochStats]) -> String {
    let mut s = String::from("epoch,train_l2,test_l2\n");
    for (i, h) in history.iter().enumerate() {
        s.push_str(&format!("{},{:.9e},{:.9e}\n", i, h.train_l2, h.test_l2));
    }
    s
}
