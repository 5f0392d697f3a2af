//! Synthetic shape dataset and its binary file format.
//!
//! Each image renders one shape from a fixed library (bar, L, T, triangle,
//! disc) at a random position, quarter-turn orientation, and color, on a dim
//! background. Rasterization is axis-aligned only, so the orientation label
//! is exactly the rendered quarter-turn: rotating the base mask by rot90 IS
//! the next orientation. Labels per image: (class id, orientation id).
//!
//! File format ("SERD", all integers little-endian):
//!   magic "SERD" | version u16 | count u32 | height u32 | width u32 |
//!   channels u32 | label arity u32 | f32 payload count*h*w*c |
//!   labels u32 x (count * arity)

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::io::RawTensor;

pub const SERD_MAGIC: &[u8; 4] = b"SERD";
pub const SERD_VERSION: u16 = 1;

#[derive(Debug)]
pub enum DataError {
    Io { path: String, err: std::io::Error },
    Format { path: String, detail: String },
    BadSpec(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, err } => write!(f, "{path}: {err}"),
            DataError::Format { path, detail } => write!(f, "{path}: {detail}"),
            DataError::BadSpec(s) => write!(f, "bad dataset spec: {s}"),
        }
    }
}

impl std::error::Error for DataError {}

pub const SHAPE_NAMES: [&str; 5] = ["bar", "ell", "tee", "triangle", "disc"];
/// Side of the box each shape mask is rendered into.
pub const SHAPE_BOX: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub side: usize,
    pub patch: usize,
    pub n_classes: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 2000,
            side: 32,
            patch: 8,
            n_classes: 5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_images == 0 {
            return Err(DataError::BadSpec("n_images must be positive".into()));
        }
        if self.side % self.patch != 0 {
            return Err(DataError::BadSpec(format!(
                "side {} not divisible by patch {}",
                self.side, self.patch
            )));
        }
        if self.n_classes == 0 || self.n_classes > SHAPE_NAMES.len() {
            return Err(DataError::BadSpec(format!(
                "n_classes must be 1..={}, got {}",
                SHAPE_NAMES.len(),
                self.n_classes
            )));
        }
        if self.side < SHAPE_BOX {
            return Err(DataError::BadSpec(format!(
                "side {} smaller than the {SHAPE_BOX}-pixel shape box",
                self.side
            )));
        }
        Ok(())
    }
}

/// Binary mask of a shape at orientation 0 inside the SHAPE_BOX square.
fn base_mask(class: usize) -> Vec<bool> {
    let b = SHAPE_BOX;
    let mut m = vec![false; b * b];
    let fill = |y0: usize, y1: usize, x0: usize, x1: usize, m: &mut Vec<bool>| {
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * b + x] = true;
            }
        }
    };
    match class {
        // horizontal bar
        0 => fill(6, 10, 1, 15, &mut m),
        // L: vertical stroke plus foot
        1 => {
            fill(1, 15, 2, 6, &mut m);
            fill(11, 15, 6, 14, &mut m);
        }
        // T: top bar plus stem
        2 => {
            fill(1, 5, 1, 15, &mut m);
            fill(5, 15, 6, 10, &mut m);
        }
        // right triangle (staircase rasterization)
        3 => {
            for y in 1..15 {
                for x in 1..15 {
                    if y + x <= 14 {
                        m[y * b + x] = true;
                    }
                }
            }
        }
        // disc centered on the box (quarter-turn symmetric exactly)
        4 => {
            for y in 0..b {
                for x in 0..b {
                    let dy = y as f64 - 7.5;
                    let dx = x as f64 - 7.5;
                    if dy * dy + dx * dx <= 6.5 * 6.5 {
                        m[y * b + x] = true;
                    }
                }
            }
        }
        _ => panic!("class {class} out of range"),
    }
    m
}

/// Rotate a square boolean mask by CCW quarter turns, the same convention as
/// the image action: out[r][c] = in[c][side-1-r].
fn rotate_mask(mask: &[bool], side: usize, quarter_turns: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = vec![false; side * side];
        for r in 0..side {
            for c in 0..side {
                next[r * side + c] = cur[c * side + (side - 1 - r)];
            }
        }
        cur = next;
    }
    cur
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub class: usize,
    pub orientation: usize,
    /// Top-left corner of the shape box.
    pub offset: (usize, usize),
    pub fg: [f32; 3],
    pub bg: [f32; 3],
}

/// Deterministic rasterization of one image from its parameters.
pub fn render(spec: &SyntheticSpec, p: &RenderParams) -> RawTensor<f32> {
    let side = spec.side;
    let c = 3;
    let mask = rotate_mask(&base_mask(p.class), SHAPE_BOX, p.orientation);
    let mut data = Vec::with_capacity(side * side * c);
    for _ in 0..side * side {
        data.extend_from_slice(&p.bg);
    }
    for y in 0..SHAPE_BOX {
        for x in 0..SHAPE_BOX {
            if mask[y * SHAPE_BOX + x] {
                let (oy, ox) = (p.offset.0 + y, p.offset.1 + x);
                let at = (oy * side + ox) * c;
                data[at..at + 3].copy_from_slice(&p.fg);
            }
        }
    }
    RawTensor::new(vec![side, side, c], data)
}

/// Parameters of image `index` under (spec, seed): the sampling is a pure
/// function, so any image regenerates independently.
pub fn sample_params(spec: &SyntheticSpec, seed: u64, index: usize) -> RenderParams {
    let mut rng = Rng::stream(seed, &[0x5e_da7a, index as u64]);
    let class = rng.below(spec.n_classes);
    let orientation = rng.below(4);
    let max_off = spec.side - SHAPE_BOX;
    let offset = (rng.below(max_off + 1), rng.below(max_off + 1));
    let fg = [
        rng.uniform(0.3, 1.0) as f32,
        rng.uniform(0.3, 1.0) as f32,
        rng.uniform(0.3, 1.0) as f32,
    ];
    let bg = [
        rng.uniform(0.0, 0.15) as f32,
        rng.uniform(0.0, 0.15) as f32,
        rng.uniform(0.0, 0.15) as f32,
    ];
    RenderParams {
        class,
        orientation,
        offset,
        fg,
        bg,
    }
}

/// Centered rendering used by the render-vs-rotate oracle.
pub fn render_centered(spec: &SyntheticSpec, class: usize, orientation: usize, fg: [f32; 3], bg: [f32; 3]) -> RawTensor<f32> {
    let off = (spec.side - SHAPE_BOX) / 2;
    render(
        spec,
        &RenderParams {
            class,
            orientation,
            offset: (off, off),
            fg,
            bg,
        },
    )
}

/// In-memory dataset: images plus (class, orientation) labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<RawTensor<f32>>,
    /// labels[i] = [class, orientation]
    pub labels: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.labels[i][0] as usize
    }

    pub fn orientation_of(&self, i: usize) -> usize {
        self.labels[i][1] as usize
    }

    pub fn image_as<S: Scalar>(&self, i: usize) -> RawTensor<S> {
        RawTensor::new(
            self.images[i].shape.clone(),
            self.images[i].data.iter().map(|v| S::from_f64(*v as f64)).collect(),
        )
    }
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.n_images);
    let mut labels = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let p = sample_params(spec, seed, i);
        images.push(render(spec, &p));
        labels.push(vec![p.class as u32, p.orientation as u32]);
    }
    Ok(Dataset {
        height: spec.side,
        width: spec.side,
        channels: 3,
        images,
        labels,
    })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let err = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        err: e,
    };
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp).map_err(err)?;
        let mut w = BufWriter::new(f);
        let arity = ds.labels.first().map(|l| l.len()).unwrap_or(2) as u32;
        w.write_all(SERD_MAGIC).map_err(err)?;
        w.write_all(&SERD_VERSION.to_le_bytes()).map_err(err)?;
        w.write_all(&(ds.len() as u32).to_le_bytes()).map_err(err)?;
        w.write_all(&(ds.height as u32).to_le_bytes()).map_err(err)?;
        w.write_all(&(ds.width as u32).to_le_bytes()).map_err(err)?;
        w.write_all(&(ds.channels as u32).to_le_bytes()).map_err(err)?;
        w.write_all(&arity.to_le_bytes()).map_err(err)?;
        for img in &ds.images {
            for v in &img.data {
                w.write_all(&v.to_le_bytes()).map_err(err)?;
            }
        }
        for l in &ds.labels {
            for v in l {
                w.write_all(&v.to_le_bytes()).map_err(err)?;
            }
        }
        w.flush().map_err(err)?;
    }
    std::fs::rename(&tmp, path).map_err(err)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let err = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        err: e,
    };
    let bad = |detail: &str| DataError::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let f = File::open(path).map_err(err)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(err)?;
    if &magic != SERD_MAGIC {
        return Err(bad("bad magic, expected SERD"));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(err)?;
    if u16::from_le_bytes(b2) != SERD_VERSION {
        return Err(bad("unsupported version"));
    }
    let mut b4 = [0u8; 4];
    let mut next_u32 = |r: &mut BufReader<File>| -> Result<u32, DataError> {
        r.read_exact(&mut b4).map_err(err)?;
        Ok(u32::from_le_bytes(b4))
    };
    let count = next_u32(&mut r)? as usize;
    let height = next_u32(&mut r)? as usize;
    let width = next_u32(&mut r)? as usize;
    let channels = next_u32(&mut r)? as usize;
    let arity = next_u32(&mut r)? as usize;
    let per = height * width * channels;
    let mut payload = vec![0u8; count * per * 4];
    r.read_exact(&mut payload).map_err(err)?;
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let off = i * per * 4;
        let data: Vec<f32> = payload[off..off + per * 4]
            .chunks(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        for v in &data {
            if !(0.0..=1.0).contains(v) {
                return Err(bad("pixel value outside [0,1]"));
            }
        }
        images.push(RawTensor::new(vec![height, width, channels], data));
    }
    let mut lbytes = vec![0u8; count * arity * 4];
    r.read_exact(&mut lbytes).map_err(err)?;
    let labels = (0..count)
        .map(|i| {
            (0..arity)
                .map(|j| {
                    let off = (i * arity + j) * 4;
                    u32::from_le_bytes([
                        lbytes[off],
                        lbytes[off + 1],
                        lbytes[off + 2],
                        lbytes[off + 3],
                    ])
                })
                .collect()
        })
        .collect();
    Ok(Dataset {
        height,
        width,
        channels,
        images,
        labels,
    })
}

/// Generate and write a dataset plus a text manifest echoing the spec and
/// seed next to it.
pub fn gen_data(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<Dataset, DataError> {
    let ds = generate(spec, seed)?;
    write_dataset(out, &ds)?;
    let manifest = format!(
        "format = SERD v{SERD_VERSION}\nn_images = {}\nside = {}\npatch = {}\nn_classes = {}\nseed = {}\nlabels = class, orientation\n",
        spec.n_images, spec.side, spec.patch, spec.n_classes, seed
    );
    let mpath = out.with_extension("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| DataError::Io {
        path: mpath.display().to_string(),
        err: e,
    })?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{act_image, GroupElement};

    #[test]
    fn generation_is_deterministic_and_file_roundtrips() {
        let spec = SyntheticSpec {
            n_images: 8,
            ..SyntheticSpec::default()
        };
        let a = generate(&spec, 3).unwrap();
        let b = generate(&spec, 3).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x, y);
        }
        let dir = std::env::temp_dir().join("softequiv_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.serd");
        write_dataset(&path, &a).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), a.len());
        for (x, y) in a.images.iter().zip(&back.images) {
            assert_eq!(x, y);
        }
        assert_eq!(a.labels, back.labels);
    }

    #[test]
    fn byte_identical_file_across_runs() {
        let spec = SyntheticSpec {
            n_images: 1,
            n_classes: 1,
            ..SyntheticSpec::default()
        };
        let dir = std::env::temp_dir().join("softequiv_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("one_a.serd");
        let p2 = dir.join("one_b.serd");
        gen_data(&spec, 11, &p1).unwrap();
        gen_data(&spec, 11, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rotating_centered_render_gives_next_orientation() {
        let spec = SyntheticSpec::default();
        let fg = [0.9, 0.5, 0.2];
        let bg = [0.05, 0.08, 0.1];
        for class in 0..5 {
            for o in 0..4 {
                let img = render_centered(&spec, class, o, fg, bg);
                let rotated = act_image(GroupElement::dihedral(1, false), &img).unwrap();
                let next = render_centered(&spec, class, (o + 1) % 4, fg, bg);
                assert_eq!(rotated, next, "class {class}, orientation {o}");
            }
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        let spec = SyntheticSpec {
            n_images: 10_000,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec, 5).unwrap();
        let mut counts = vec![0usize; 5];
        for i in 0..ds.len() {
            counts[ds.class_of(i)] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.2).abs() < 0.02, "class fraction {f}");
        }
    }

    #[test]
    fn values_stay_in_unit_range_and_labels_valid() {
        let spec = SyntheticSpec {
            n_images: 64,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec, 9).unwrap();
        for img in &ds.images {
            for v in &img.data {
                assert!((0.0..=1.0).contains(v));
            }
        }
        for i in 0..ds.len() {
            assert!(ds.class_of(i) < 5);
            assert!(ds.orientation_of(i) < 4);
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(SyntheticSpec {
            side: 30,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            n_classes: 6,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            n_images: 0,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
    }
}
