//! On-disk formats: JSON sidecar + raw f32le payload for grids, CSV for
//! polylines, binary PGM for quick-look images.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{DisplacementField2, DisplacementField3, ScalarImage, ScalarVolume};
use crate::polyline::{Point3, Polyline3};

pub const DTYPE: &str = "f32le";
pub const ORDERING: &str = "x-fastest";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Metadata stored next to a raw payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    /// `image`, `volume`, `field2` or `field3`.
    pub kind: String,
    /// Grid extent, x first. Images have two entries.
    pub dims: Vec<usize>,
    pub components: usize,
    pub pitch: f64,
    pub dtype: String,
    pub ordering: String,
    /// File name of the payload, relative to the sidecar.
    pub payload: String,
    pub sha256: String,
}

fn encode(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("payload length is not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Paths of the sidecar and payload for a stem such as `out/frame_000`.
pub fn grid_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("raw"))
}

fn write_grid(stem: &Path, kind: &str, dims: Vec<usize>, components: usize, pitch: f64, payload: Vec<u8>) -> Result<Vec<PathBuf>> {
    let (meta, raw) = grid_paths(stem);
    if let Some(dir) = meta.parent() {
        fs::create_dir_all(dir)?;
    }
    let side = Sidecar {
        kind: kind.into(),
        dims,
        components,
        pitch,
        dtype: DTYPE.into(),
        ordering: ORDERING.into(),
        payload: raw.file_name().unwrap().to_string_lossy().into_owned(),
        sha256: sha256_hex(&payload),
    };
    fs::write(&raw, &payload)?;
    fs::write(&meta, serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(vec![meta, raw])
}

fn read_grid(path: &Path, kind: &str) -> Result<(Sidecar, Vec<f64>)> {
    let meta = if path.extension().is_some_and(|e| e == "json") {
        path.to_path_buf()
    } else {
        path.with_extension("json")
    };
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(&meta)?)?;
    if side.kind != kind {
        return Err(Error::Format(format!("{}: expected a {kind}, found {}", meta.display(), side.kind)));
    }
    if side.dtype != DTYPE || side.ordering != ORDERING {
        return Err(Error::Format(format!("{}: unsupported dtype/ordering", meta.display())));
    }
    let raw = meta.with_file_name(&side.payload);
    let bytes = fs::read(&raw)?;
    if sha256_hex(&bytes) != side.sha256 {
        return Err(Error::Format(format!("{}: checksum mismatch", raw.display())));
    }
    let data = decode(&bytes)?;
    let expected = side.dims.iter().product::<usize>() * side.components;
    if data.len() != expected {
        return Err(Error::mismatch(expected, data.len()));
    }
    Ok((side, data))
}

pub fn write_image(stem: &Path, img: &ScalarImage) -> Result<Vec<PathBuf>> {
    let (w, h) = img.dims();
    write_grid(stem, "image", vec![w, h], 1, img.pixel_pitch(), encode(img.data().iter().copied()))
}

pub fn read_image(path: &Path) -> Result<ScalarImage> {
    let (s, data) = read_grid(path, "image")?;
    if s.dims.len() != 2 {
        return Err(Error::Format("image sidecar needs two dims".into()));
    }
    Ok(ScalarImage::new(s.dims[0], s.dims[1], data)?.with_pitch(s.pitch))
}

pub fn write_volume(stem: &Path, vol: &ScalarVolume) -> Result<Vec<PathBuf>> {
    write_grid(stem, "volume", vol.dims().to_vec(), 1, vol.voxel_pitch(), encode(vol.data().iter().copied()))
}

pub fn read_volume(path: &Path) -> Result<ScalarVolume> {
    let (s, data) = read_grid(path, "volume")?;
    let dims: [usize; 3] = s
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::Format("volume sidecar needs three dims".into()))?;
    Ok(ScalarVolume::new(dims, data)?.with_pitch(s.pitch))
}

/// Components are stored one after another (planar).
pub fn write_field2(stem: &Path, f: &DisplacementField2) -> Result<Vec<PathBuf>> {
    let (w, h) = f.dims();
    write_grid(stem, "field2", vec![w, h], 2, 1.0, encode(f.dx().iter().chain(f.dy()).copied()))
}

pub fn read_field2(path: &Path) -> Result<DisplacementField2> {
    let (s, data) = read_grid(path, "field2")?;
    let n = data.len() / 2;
    DisplacementField2::from_components(s.dims[0], s.dims[1], data[..n].to_vec(), data[n..].to_vec())
}

pub fn write_field3(stem: &Path, f: &DisplacementField3) -> Result<Vec<PathBuf>> {
    let c = f.components();
    write_grid(stem, "field3", f.dims().to_vec(), 3, 1.0, encode(c.iter().flatten().copied()))
}

pub fn read_field3(path: &Path) -> Result<DisplacementField3> {
    let (s, data) = read_grid(path, "field3")?;
    let dims: [usize; 3] = s
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::Format("field sidecar needs three dims".into()))?;
    let n = data.len() / 3;
    DisplacementField3::from_components(dims, std::array::from_fn(|c| data[c * n..(c + 1) * n].to_vec()))
}

/// `line_id,x,y,z` rows with a header.
pub fn polylines_csv(lines: &[Polyline3]) -> String {
    let mut s = String::from("line_id,x,y,z\n");
    for (id, l) in lines.iter().enumerate() {
        for p in l.points() {
            s.push_str(&format!("{id},{:.6},{:.6},{:.6}\n", p[0], p[1], p[2]));
        }
    }
    s
}

pub fn write_polylines(path: &Path, lines: &[Polyline3]) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, polylines_csv(lines))?;
    Ok(path.to_path_buf())
}

/// Parse a polyline table; every line gets `radius`.
pub fn parse_polylines(text: &str, radius: f64) -> Result<Vec<Polyline3>> {
    let mut rows = text.lines().filter(|l| !l.trim().is_empty());
    match rows.next() {
        Some(h) if h.trim() == "line_id,x,y,z" => {}
        _ => return Err(Error::Format("polyline table needs header line_id,x,y,z".into())),
    }
    let mut groups: Vec<(usize, Vec<Point3>)> = Vec::new();
    for (n, row) in rows.enumerate() {
        let f: Vec<&str> = row.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("polyline row {}: {row:?}", n + 2));
        if f.len() != 4 {
            return Err(bad());
        }
        let id: usize = f[0].parse().map_err(|_| bad())?;
        let p: Point3 = [
            f[1].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
            f[3].parse().map_err(|_| bad())?,
        ];
        match groups.last_mut() {
            Some((last, pts)) if *last == id => pts.push(p),
            _ => {
                if groups.iter().any(|(g, _)| *g == id) {
                    return Err(Error::Format(format!("line {id} is not contiguous")));
                }
                groups.push((id, vec![p]));
            }
        }
    }
    groups.into_iter().map(|(_, pts)| Polyline3::new(pts, radius)).collect()
}

pub fn read_polylines(path: &Path, radius: f64) -> Result<Vec<Polyline3>> {
    parse_polylines(&fs::read_to_string(path)?, radius)
}

/// 8-bit binary PGM, linearly mapping [min, max] to [0, 255].
pub fn pgm_bytes(img: &ScalarImage) -> Vec<u8> {
    let (w, h) = img.dims();
    let (lo, hi) = (img.min(), img.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn write_pgm(path: &Path, img: &ScalarImage) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, pgm_bytes(img))?;
    Ok(path.to_path_buf())
}

/// Grey image with `mask` pixels burnt in at full white.
pub fn overlay(img: &ScalarImage, mask: &ScalarImage) -> Result<ScalarImage> {
    if img.dims() != mask.dims() {
        return Err(Error::mismatch(img.dims(), mask.dims()));
    }
    let (lo, hi) = (img.min(), img.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = img.dims();
    ScalarImage::new(
        w,
        h,
        img.data()
            .iter()
            .zip(mask.data())
            .map(|(v, m)| if *m > 0.5 { 1.0 } else { 0.8 * (v - lo) / span })
            .collect(),
    )
}

/// Axial slice `z` of a volume as an image.
pub fn slice_z(vol: &ScalarVolume, z: usize) -> Result<ScalarImage> {
    let [nx, ny, nz] = vol.dims();
    if z >= nz {
        return Err(Error::InvalidParameter(format!("slice {z} outside depth {nz}")));
    }
    Ok(ScalarImage::from_fn(nx, ny, |x, y| vol.get(x, y, z)))
}

/// Maximum-intensity projection along y (a side view that shows vertical
/// lines whole).
pub fn mip_y(vol: &ScalarVolume) -> ScalarImage {
    let [nx, ny, nz] = vol.dims();
    ScalarImage::from_fn(nx, nz, |x, z| (0..ny).map(|y| vol.get(x, y, z)).fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let v = ScalarVolume::from_fn([5, 4, 3], |x, y, z| x as f64 + 0.5 * y as f64 - z as f64);
        let files = write_volume(&dir.path().join("v"), &v).unwrap();
        assert_eq!(files.len(), 2);
        let back = read_volume(&files[0]).unwrap();
        assert_eq!(back, v);
        // Corrupt the payload.
        fs::write(&files[1], vec![0u8; 60 * 4]).unwrap();
        assert!(matches!(read_volume(&files[0]), Err(Error::Format(_))));
        assert!(read_image(&files[0]).is_err());
    }

    #[test]
    fn image_and_field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ScalarImage::from_fn(6, 3, |x, y| (x * y) as f64).with_pitch(2.0);
        write_image(&dir.path().join("i"), &img).unwrap();
        assert_eq!(read_image(&dir.path().join("i.json")).unwrap(), img);
        let f = DisplacementField2::from_fn(4, 5, |x, y| [x as f64, -(y as f64)]);
        write_field2(&dir.path().join("f"), &f).unwrap();
        assert_eq!(read_field2(&dir.path().join("f")).unwrap(), f);
        let g = DisplacementField3::constant([3, 3, 2], [0.5, 1.0, -2.0]);
        write_field3(&dir.path().join("g"), &g).unwrap();
        assert_eq!(read_field3(&dir.path().join("g")).unwrap(), g);
    }

    #[test]
    fn polylines_round_trip() {
        let a = Polyline3::new(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.5], [4.0, 5.0, 9.0]], 1.5).unwrap();
        let b = Polyline3::segment([0.25, 0.0, 0.0], [0.0, 0.0, 3.0], 1.5).unwrap();
        let text = polylines_csv(&[a.clone(), b.clone()]);
        assert!(text.starts_with("line_id,x,y,z\n"));
        assert_eq!(parse_polylines(&text, 1.5).unwrap(), vec![a, b]);
        assert!(parse_polylines("x,y\n", 1.0).is_err());
        assert!(parse_polylines("line_id,x,y,z\n0,1,2,3\n1,1,2,3\n1,2,2,2\n0,5,5,5\n", 1.0).is_err());
    }

    #[test]
    fn pgm_header_and_range() {
        let img = ScalarImage::from_fn(3, 2, |x, _| x as f64);
        let b = pgm_bytes(&img);
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&b[b.len() - 3..], &[0, 128, 255]);
    }
}
