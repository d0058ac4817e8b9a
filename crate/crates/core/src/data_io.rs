//! Dataset generators, image ingestion and the dataset CSV format.
//!
//! A dataset CSV has the header `slice,x1,...,xd` (or `x1,...,xd` without
//! slices) and one point per row.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::distributions::GaussianParams;
use crate::error::{config, Error, Result};
use crate::rng::{stream, streams};

/// Points with an optional 1-based time slice per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Vec<DVector<f64>>,
    pub slices: Option<Vec<usize>>,
}

impl Dataset {
    /// Validates dimensions, finiteness and slice indices.
    pub fn new(points: Vec<DVector<f64>>, slices: Option<Vec<usize>>) -> Result<Self> {
        let dim = points.first().map_or(0, |p| p.len());
        for (n, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Parse(format!("point {n} has dimension {} but point 0 has {dim}", p.len())));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("point {n} has a non-finite coordinate")));
            }
        }
        if let Some(s) = &slices {
            if s.len() != points.len() {
                return Err(Error::Parse(format!("{} slice indices for {} points", s.len(), points.len())));
            }
            if let Some(n) = s.iter().position(|&t| t == 0) {
                return Err(Error::Parse(format!("slice index of point {n} must be at least 1")));
            }
        }
        Ok(Dataset { points, slices })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    /// Number of slices `T`, the largest slice index; 1 without slices.
    pub fn num_slices(&self) -> usize {
        match &self.slices {
            Some(s) => s.iter().copied().max().unwrap_or(0),
            None => 1,
        }
    }

    /// Points grouped by slice `1..=T`; slices without points are empty.
    pub fn by_slice(&self) -> Vec<Vec<DVector<f64>>> {
        let mut out = vec![Vec::new(); self.num_slices()];
        for (n, p) in self.points.iter().enumerate() {
            let t = self.slices.as_ref().map_or(1, |s| s[n]);
            out[t - 1].push(p.clone());
        }
        out
    }

    /// Positions of each point within [`by_slice`](Self::by_slice):
    /// `(slice - 1, index within slice)`.
    pub fn slice_positions(&self) -> Vec<(usize, usize)> {
        let mut next = vec![0; self.num_slices()];
        (0..self.len())
            .map(|n| {
                let t = self.slices.as_ref().map_or(1, |s| s[n]) - 1;
                next[t] += 1;
                (t, next[t] - 1)
            })
            .collect()
    }

    /// Appends `other`, which must have slice indices iff `self` does.
    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        if !self.is_empty() && !other.is_empty() && self.dim() != other.dim() {
            return Err(Error::Parse(format!("cannot join datasets of dimension {} and {}", self.dim(), other.dim())));
        }
        match (&mut self.slices, other.slices) {
            (Some(a), Some(b)) => a.extend(b),
            (None, None) => {}
            _ => return Err(Error::Parse("cannot join datasets with and without slices".into())),
        }
        self.points.extend(other.points);
        Ok(())
    }
}

/// Two mirrored 2-D blocks and a center point.
///
/// The first `n_side` points are Gaussian around `(-offset, 0)` with
/// standard deviation `spread`; the next `n_side` are the same points
/// negated, so the right block is the exact point reflection of the left
/// one through the origin; the last point is the origin.
pub fn synth_symmetric(n_side: usize, offset: f64, spread: f64, seed: u64) -> Result<Dataset> {
    if n_side == 0 {
        return Err(config("n_side must be at least 1"));
    }
    if !(offset > 0.0) || !offset.is_finite() || !(spread > 0.0) || !spread.is_finite() {
        return Err(config(format!("offset and spread must be positive, got {offset} and {spread}")));
    }
    let mut rng = stream(seed, streams::DATA);
    let left: Vec<DVector<f64>> = (0..n_side)
        .map(|_| {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            DVector::from_vec(vec![-offset + spread * dx, spread * dy])
        })
        .collect();
    let right: Vec<DVector<f64>> = left.iter().map(|p| -p).collect();
    let mut points = left;
    points.extend(right);
    points.push(DVector::zeros(2));
    Dataset::new(points, None)
}

/// A cluster moving at constant velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct MovingCluster {
    pub start: DVector<f64>,
    pub velocity: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Points per slice.
    pub count: usize,
}

/// In slice `t` each cluster emits `count` Gaussian points around
/// `start + (t - 1) velocity`. Points are ordered by slice, then cluster.
pub fn synth_moving_clusters(slices: usize, clusters: &[MovingCluster], seed: u64) -> Result<Dataset> {
    if slices == 0 {
        return Err(config("at least one slice is required"));
    }
    let dim = clusters.first().map_or(0, |c| c.start.len());
    for (k, c) in clusters.iter().enumerate() {
        if c.start.len() != dim || c.velocity.len() != dim || c.covariance.nrows() != dim {
            return Err(config(format!("cluster {k} has inconsistent dimensions")));
        }
    }
    let mut rng = stream(seed, streams::DATA);
    let mut points = Vec::new();
    let mut index = Vec::new();
    for t in 1..=slices {
        for c in clusters {
            let center = &c.start + (t - 1) as f64 * &c.velocity;
            let g = GaussianParams::new(center, c.covariance.clone()).map_err(|e| config(e.to_string()))?;
            for _ in 0..c.count {
                points.push(g.sample(&mut rng));
                index.push(t);
            }
        }
    }
    Dataset::new(points, Some(index))
}

/// An 8-bit grayscale raster in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parse("image has no pixels".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::Parse(format!("{} pixels for a {width}x{height} image", pixels.len())));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

fn pgm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    // header fields, skipping whitespace and comments; returns the offset
    // just past the single whitespace byte after the last field
    let mut out = Vec::with_capacity(count);
    let mut pos = 0;
    while out.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated or malformed PGM header".into()));
        }
        let field = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        out.push(field.parse().map_err(|_| Error::Parse(format!("PGM header value {field} is too large")))?);
    }
    Ok((out, pos + 1))
}

/// Parses a plain (`P2`) or binary (`P5`) PGM with `maxval <= 255`. Pixel
/// values are taken as they are, without rescaling to 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'2' | b'5') {
        return Err(Error::Parse("not a P2 or P5 PGM file".into()));
    }
    let binary = bytes[1] == b'5';
    let (header, offset) = pgm_tokens(&bytes[2..], 3)?;
    let (width, height, maxval) = (header[0], header[1], header[2]);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("PGM maxval {maxval} is not an 8-bit range")));
    }
    let body = &bytes[(2 + offset).min(bytes.len())..];
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Parse("PGM dimensions overflow".into()))?;
    let pixels = if binary {
        if body.len() < n {
            return Err(Error::Parse(format!("PGM has {} of {n} pixel bytes", body.len())));
        }
        body[..n].to_vec()
    } else {
        let text = std::str::from_utf8(body).map_err(|_| Error::Parse("plain PGM body is not text".into()))?;
        let values = text
            .split_ascii_whitespace()
            .take(n)
            .map(|v| v.parse::<usize>().map_err(|_| Error::Parse(format!("bad PGM pixel {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() < n {
            return Err(Error::Parse(format!("PGM has {} of {n} pixels", values.len())));
        }
        if let Some(v) = values.iter().find(|&&v| v > maxval) {
            return Err(Error::Parse(format!("PGM pixel {v} exceeds maxval {maxval}")));
        }
        values.into_iter().map(|v| v as u8).collect()
    };
    GrayImage::new(width, height, pixels)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

/// Turns image intensity into points: a pixel with value `v > threshold`
/// emits `round(v / intensity_per_point)` points at its center in
/// unit-square coordinates `((c + 0.5) / width, (r + 0.5) / height)`.
///
/// With `jitter_seed` set, points are spread uniformly over the pixel
/// instead.
pub fn ingest_grayscale_image(
    image: &GrayImage,
    intensity_per_point: f64,
    threshold: u8,
    slice_index: Option<usize>,
    jitter_seed: Option<u64>,
) -> Result<Dataset> {
    if !(intensity_per_point > 0.0) || !intensity_per_point.is_finite() {
        return Err(config(format!("intensity_per_point must be positive, got {intensity_per_point}")));
    }
    let mut jitter = jitter_seed.map(|s| stream(s, streams::JITTER));
    let (w, h) = (image.width as f64, image.height as f64);
    let mut points = Vec::new();
    for r in 0..image.height {
        for c in 0..image.width {
            let v = image.get(r, c);
            if v <= threshold {
                continue;
            }
            let count = (v as f64 / intensity_per_point).round() as usize;
            for _ in 0..count {
                let (du, dv) = match jitter.as_mut() {
                    Some(rng) => (rng.random::<f64>(), rng.random::<f64>()),
                    None => (0.5, 0.5),
                };
                points.push(DVector::from_vec(vec![(c as f64 + du) / w, (r as f64 + dv) / h]));
            }
        }
    }
    let slices = slice_index.map(|t| vec![t; points.len()]);
    Dataset::new(points, slices)
}

/// Writes the dataset CSV. Numbers use the shortest representation that
/// reads back to the same value.
pub fn write_dataset<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = dataset.dim();
    let mut header: Vec<String> = Vec::with_capacity(d + 1);
    if dataset.slices.is_some() {
        header.push("slice".into());
    }
    header.extend((1..=d).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for (n, p) in dataset.points.iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(d + 1);
        if let Some(s) = &dataset.slices {
            row.push(s[n].to_string());
        }
        row.extend(p.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset(dataset, fs::File::create(path)?)
}

/// Reads the dataset CSV.
pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let has_slice = header.get(0) == Some("slice");
    let coords: Vec<&str> = header.iter().skip(usize::from(has_slice)).collect();
    if coords.is_empty() {
        return Err(Error::Parse("dataset header has no coordinate columns".into()));
    }
    for (k, name) in coords.iter().enumerate() {
        if *name != format!("x{}", k + 1) {
            return Err(Error::Parse(format!("unexpected column {name:?}, expected x{}", k + 1)));
        }
    }
    let mut points = Vec::new();
    let mut slices = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let mut fields = rec.iter();
        if has_slice {
            let f = fields.next().unwrap_or("");
            slices.push(f.trim().parse::<usize>().map_err(|_| Error::Parse(format!("row {row}: bad slice index {f:?}")))?);
        }
        let values = fields
            .map(|f| f.trim().parse::<f64>().map_err(|_| Error::Parse(format!("row {row}: bad number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != coords.len() {
            return Err(Error::Parse(format!("row {row} has {} coordinates, expected {}", values.len(), coords.len())));
        }
        points.push(DVector::from_vec(values));
    }
    Dataset::new(points, has_slice.then_some(slices))
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    read_dataset(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(p: &DVector<f64>) -> (u64, u64) {
        (p[0].to_bits(), p[1].to_bits())
    }

    #[test]
    fn symmetric_dataset_shape() {
        let d = synth_symmetric(25, 2.0, 0.5, 7).unwrap();
        assert_eq!(d.len(), 51);
        assert_eq!(d.points[50], DVector::zeros(2));
        // exact invariance under negation, as point sets
        let mut a: Vec<_> = d.points.iter().map(key).collect();
        let mut b: Vec<_> = d.points.iter().map(|p| key(&(-p))).collect();
        a.sort();
        b.sort();
        // -0.0 and 0.0 differ in bits; the origin maps to itself
        let zero = key(&DVector::zeros(2));
        let neg_zero = key(&(-DVector::<f64>::zeros(2)));
        let b: Vec<_> = b.into_iter().map(|k| if k == neg_zero { zero } else { k }).collect();
        let mut b = b;
        b.sort();
        assert_eq!(a, b);
        for n in 0..25 {
            assert_eq!(d.points[25 + n], -&d.points[n]);
        }
        assert_eq!(d, synth_symmetric(25, 2.0, 0.5, 7).unwrap());
        assert!(synth_symmetric(0, 2.0, 0.5, 7).is_err());
    }

    fn two_clusters() -> Vec<MovingCluster> {
        vec![
            MovingCluster {
                start: DVector::from_vec(vec![0.0, 0.0]),
                velocity: DVector::from_vec(vec![1.0, 0.5]),
                covariance: DMatrix::identity(2, 2) * 0.04,
                count: 400,
            },
            MovingCluster {
                start: DVector::from_vec(vec![5.0, 5.0]),
                velocity: DVector::from_vec(vec![-0.5, 0.0]),
                covariance: DMatrix::from_row_slice(2, 2, &[0.09, 0.02, 0.02, 0.05]),
                count: 250,
            },
        ]
    }

    #[test]
    fn moving_clusters_follow_their_paths() {
        let clusters = two_clusters();
        let d = synth_moving_clusters(4, &clusters, 3).unwrap();
        assert_eq!(d.len(), 4 * 650);
        assert_eq!(d.num_slices(), 4);
        let by = d.by_slice();
        for (t, slice) in by.iter().enumerate() {
            assert_eq!(slice.len(), 650);
            let mut offset = 0;
            for c in &clusters {
                let pts = &slice[offset..offset + c.count];
                offset += c.count;
                let mean = pts.iter().fold(DVector::zeros(2), |a, p| a + p) / c.count as f64;
                let target = &c.start + t as f64 * &c.velocity;
                for k in 0..2 {
                    let se = (c.covariance[(k, k)] / c.count as f64).sqrt();
                    assert!((mean[k] - target[k]).abs() < 4.0 * se);
                }
            }
        }
        assert_eq!(d, synth_moving_clusters(4, &clusters, 3).unwrap());
        assert_ne!(d, synth_moving_clusters(4, &clusters, 4).unwrap());
    }

    #[test]
    fn image_ingestion() {
        let zero = GrayImage::new(3, 2, vec![0; 6]).unwrap();
        assert!(ingest_grayscale_image(&zero, 10.0, 0, None, None).unwrap().is_empty());

        let mut px = vec![0; 12];
        // row 1, column 2
        px[6] = 200;
        let img = GrayImage::new(4, 3, px).unwrap();
        let d = ingest_grayscale_image(&img, 100.0, 0, Some(3), None).unwrap();
        assert_eq!(d.len(), 2);
        for p in &d.points {
            assert_eq!(p.as_slice(), &[2.5 / 4.0, 1.5 / 3.0]);
        }
        assert_eq!(d.slices, Some(vec![3, 3]));

        let px: Vec<u8> = (0..64).map(|v| (v * 4) as u8).collect();
        let img = GrayImage::new(8, 8, px.clone()).unwrap();
        for jitter in [None, Some(1)] {
            let d = ingest_grayscale_image(&img, 30.0, 20, None, jitter).unwrap();
            let expect: usize = px.iter().filter(|&&v| v > 20).map(|&v| (v as f64 / 30.0).round() as usize).sum();
            assert_eq!(d.len(), expect);
            assert!(d.points.iter().all(|p| p.iter().all(|&c| (0.0..=1.0).contains(&c))));
        }
    }

    #[test]
    fn pgm_formats() {
        let plain = b"P2\n# a comment\n3 2\n255\n0 10 20\n30 40 255\n";
        let img = parse_pgm(plain).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.pixels, vec![0, 10, 20, 30, 40, 255]);
        let mut binary = b"P5 3 2 255\n".to_vec();
        binary.extend([0u8, 10, 20, 30, 40, 255]);
        assert_eq!(parse_pgm(&binary).unwrap(), img);
        assert!(parse_pgm(b"P6 1 1 255\n\0\0\0").is_err());
        assert!(parse_pgm(b"P2 2 2 255\n1 2 3").is_err());
        assert!(parse_pgm(b"P2 1 1 65535\n1").is_err());
        assert!(read_pgm(Path::new("/nonexistent/image.pgm")).unwrap_err().to_string().contains("No such file"));
    }

    #[test]
    fn csv_round_trip() {
        let d = synth_moving_clusters(2, &two_clusters()[..1], 1).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("slice,x1,x2\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), d);

        let s = synth_symmetric(3, 1.0, 0.2, 0).unwrap();
        let mut buf = Vec::new();
        write_dataset(&s, &mut buf).unwrap();
        assert!(buf.starts_with(b"x1,x2\n"));
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), s);

        assert!(read_dataset("x1,y\n1,2\n".as_bytes()).is_err());
        assert!(read_dataset("x1\nfoo\n".as_bytes()).unwrap_err().is_usage());
        assert!(read_dataset("slice,x1\n0,1.0\n".as_bytes()).is_err());
    }

    #[test]
    fn slice_grouping() {
        let pts = (0..5).map(|v| DVector::from_element(1, v as f64)).collect();
        let d = Dataset::new(pts, Some(vec![2, 1, 2, 4, 1])).unwrap();
        let by = d.by_slice();
        assert_eq!(by.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 0, 1]);
        assert_eq!(d.slice_positions(), vec![(1, 0), (0, 0), (1, 1), (3, 0), (0, 1)]);
        assert_eq!(by[1][1][0], 2.0);
    }
}
