//! Little-endian parameter blobs shared by the model file formats.

use std::io::{Read, Write};
use std::path::Path;

use flowguide_numkit::{LayerParams, Parameterized};

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn u32(&mut self, x: usize) -> &mut Self {
        self.buf.extend_from_slice(&(x as u32).to_le_bytes());
        self
    }

    pub fn u64(&mut self, x: u64) -> &mut Self {
        self.buf.extend_from_slice(&x.to_le_bytes());
        self
    }

    pub fn f32(&mut self, x: f32) -> &mut Self {
        self.buf.extend_from_slice(&x.to_le_bytes());
        self
    }

    pub fn f32s(&mut self, xs: &[f32]) -> &mut Self {
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    /// Every weight and bias block, each prefixed by its length.
    pub fn params<M: Parameterized<f32> + ?Sized>(&mut self, model: &M) -> &mut Self {
        let mut blocks: Vec<Vec<f32>> = Vec::new();
        model.visit_params(&mut |_, p: &LayerParams<f32>| {
            blocks.push(p.weights.data().to_vec());
            blocks.push(p.biases.data().to_vec());
        });
        self.u32(blocks.len());
        for b in &blocks {
            self.u32(b.len());
            self.f32s(b);
        }
        self
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::format(
                path,
                format!("expected magic {}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(Self { path, buf, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    /// Loads blocks written by [`Writer::params`] into a model of the same architecture.
    pub fn params<M: Parameterized<f32> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let count = self.u32()?;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let n = self.u32()?;
            blocks.push(self.f32s(n)?);
        }
        let mut i = 0;
        let mut ok = true;
        model.visit_params_mut(&mut |_, p| {
            if !ok
                || i + 1 >= blocks.len()
                || blocks[i].len() != p.weights.len()
                || blocks[i + 1].len() != p.biases.len()
            {
                ok = false;
                return;
            }
            p.weights.data_mut().copy_from_slice(&blocks[i]);
            p.biases.data_mut().copy_from_slice(&blocks[i + 1]);
            i += 2;
        });
        if !ok || i != blocks.len() {
            return Err(Error::format(self.path, "parameter blocks do not match the architecture"));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}
