//! Dense row-major rasters and their on-disk format.
//!
//! Depth maps, probability maps and masks all share one layout: a 16-byte
//! header (8-byte magic, u32 width, u32 height, both little endian) followed
//! by the row-major cell data. Float grids store little-endian f32 with NaN
//! marking invalid cells; mask grids store one byte per cell.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::Vec2;

pub const MAGIC_F32: [u8; 8] = *b"GRIDF32\0";
pub const MAGIC_U8: [u8; 8] = *b"GRIDU8\0\0";

#[derive(Debug, Error)]
pub enum GridIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 8]),
    #[error("grid payload truncated: expected {expected} cells, file holds {got}")]
    Truncated { expected: usize, got: usize },
}

/// Row-major raster of `height` rows by `width` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data does not match dimensions");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn in_bounds(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Continuous pixel coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Cell containing a continuous pixel coordinate, if inside the grid.
    pub fn cell_of(&self, px: Vec2) -> Option<(usize, usize)> {
        if px.x < 0.0 || px.y < 0.0 {
            return None;
        }
        let (col, row) = (px.x as usize, px.y as usize);
        (row < self.height && col < self.width).then_some((row, col))
    }
}

impl Grid<f32> {
    /// A cell is valid when it holds a finite value.
    pub fn valid_at(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_finite()
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|v| v.is_finite()).count()
    }

    pub fn write(&self, path: &Path) -> Result<(), GridIoError> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, MAGIC_F32, self.width, self.height)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, GridIoError> {
        let mut r = BufReader::new(File::open(path)?);
        let (width, height) = read_header(&mut r, MAGIC_F32)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let expected = width * height;
        if bytes.len() != expected * 4 {
            return Err(GridIoError::Truncated { expected, got: bytes.len() / 4 });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { width, height, data })
    }
}

impl Grid<f64> {
    /// A cell is valid when it holds a finite value.
    pub fn valid_at(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_finite()
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|v| v.is_finite()).count()
    }

    /// Narrows to the 32-bit on-disk format.
    pub fn to_f32(&self) -> Grid<f32> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(|&v| v as f32).collect() }
    }
}

impl Grid<u8> {
    pub fn write(&self, path: &Path) -> Result<(), GridIoError> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, MAGIC_U8, self.width, self.height)?;
        w.write_all(&self.data)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, GridIoError> {
        let mut r = BufReader::new(File::open(path)?);
        let (width, height) = read_header(&mut r, MAGIC_U8)?;
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let expected = width * height;
        if data.len() != expected {
            return Err(GridIoError::Truncated { expected, got: data.len() });
        }
        Ok(Self { width, height, data })
    }
}

fn write_header<W: Write>(w: &mut W, magic: [u8; 8], width: usize, height: usize) -> std::io::Result<()> {
    w.write_all(&magic)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, magic: [u8; 8]) -> Result<(usize, usize), GridIoError> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got)?;
    if got != magic {
        return Err(GridIoError::BadMagic(got));
    }
    let mut dim = [0u8; 4];
    r.read_exact(&mut dim)?;
    let width = u32::from_le_bytes(dim) as usize;
    r.read_exact(&mut dim)?;
    let height = u32::from_le_bytes(dim) as usize;
    Ok((width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_grid_roundtrips_including_nan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.grid");
        let mut g = Grid::filled(3, 2, 0.0f32);
        g.set(0, 1, 2.5);
        g.set(1, 2, f32::NAN);
        g.write(&path).unwrap();
        let back = Grid::<f32>::read(&path).unwrap();
        assert_eq!(back.width(), 3);
        assert_eq!(back.height(), 2);
        assert_eq!(back.get(0, 1), 2.5);
        assert!(!back.valid_at(1, 2));
        assert_eq!(back.count_valid(), 5);
    }

    #[test]
    fn u8_grid_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.grid");
        let g = Grid::from_vec(2, 2, vec![0u8, 255, 128, 1]);
        g.write(&path).unwrap();
        assert_eq!(Grid::<u8>::read(&path).unwrap(), g);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.grid");
        Grid::from_vec(1, 1, vec![7u8]).write(&path).unwrap();
        assert!(matches!(Grid::<f32>::read(&path), Err(GridIoError::BadMagic(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.grid");
        let mut w = BufWriter::new(File::create(&path).unwrap());
        write_header(&mut w, MAGIC_F32, 4, 4).unwrap();
        w.write_all(&1.0f32.to_le_bytes()).unwrap();
        w.flush().unwrap();
        drop(w);
        assert!(matches!(Grid::<f32>::read(&path), Err(GridIoError::Truncated { .. })));
    }

    #[test]
    fn cell_centers_and_lookup_agree() {
        let g = Grid::filled(10, 6, 0u8);
        let c = g.cell_center(2, 7);
        assert_eq!(g.cell_of(c), Some((2, 7)));
        assert_eq!(g.cell_of(Vec2::new(-0.1, 0.0)), None);
        assert_eq!(g.cell_of(Vec2::new(9.99, 5.99)), Some((5, 9)));
    }
}
