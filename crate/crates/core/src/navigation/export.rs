//! PGM exports with a `key=value` sidecar describing the grid.
//!
//! Images are binary 8-bit PGM (`P5`). Row 0 is the largest `iy` so the
//! picture has +y up. Obstacle maps use 0 = obstacle, 127 = explorable,
//! 255 = navigable; value maps scale `[0, 1]` to `[0, 255]`.

use std::fs;
use std::io;
use std::path::{Path as FsPath, PathBuf};

use super::{Cell, CellState, GridGeometry, ObstacleMap2D, ValueMap2D};

#[derive(Debug, Clone, PartialEq)]
pub struct ExportMeta {
    pub geometry: GridGeometry,
    pub kind: String,
}

impl ExportMeta {
    fn render(&self) -> String {
        let g = &self.geometry;
        format!(
            "kind={}\norigin_x={}\norigin_y={}\nresolution={}\nwidth={}\nheight={}\nrow0=max_y\n",
            self.kind, g.origin[0], g.origin[1], g.resolution, g.nx, g.ny
        )
    }
}

fn sidecar(path: &FsPath) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn write_pgm(path: &FsPath, meta: &ExportMeta, pixel: impl Fn(Cell) -> u8) -> io::Result<()> {
    let g = meta.geometry;
    let mut out = format!("P5\n{} {}\n255\n", g.nx, g.ny).into_bytes();
    for row in 0..g.ny {
        let iy = g.ny - 1 - row;
        out.extend((0..g.nx).map(|ix| pixel(Cell::new(ix, iy))));
    }
    fs::write(path, out)?;
    fs::write(sidecar(path), meta.render())
}

pub fn export_obstacle_map(map: &ObstacleMap2D, path: &FsPath) -> io::Result<()> {
    let meta = ExportMeta {
        geometry: map.geometry,
        kind: "obstacle".into(),
    };
    write_pgm(path, &meta, |c| match map.state(c) {
        CellState::Obstacle => 0,
        CellState::Explorable => 127,
        CellState::Navigable => 255,
    })
}

pub fn export_value_map(map: &ValueMap2D, path: &FsPath) -> io::Result<()> {
    let meta = ExportMeta {
        geometry: map.geometry,
        kind: "value".into(),
    };
    write_pgm(path, &meta, |c| (map.get(c).clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Reads back a `P5` image as `(width, height, pixels)` in file row order.
pub fn read_pgm(path: &FsPath) -> io::Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != w * h {
        return Err(bad("raster size mismatch"));
    }
    Ok((w, h, data.to_vec()))
}
