//! Little-endian byte writer and bounds-checked reader.

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{DType, Tensor};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len32(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| Error::Format("string longer than 65535 bytes".into()))?;
        self.u16(n);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    pub fn params(&mut self, p: &QuantParams) {
        self.f32(p.scale);
        self.i32(p.zero_point);
        self.u8(p.bits);
        self.u8(p.signed as u8);
    }

    pub fn shape(&mut self, shape: &[usize]) -> Result<()> {
        self.u8(u8::try_from(shape.len()).map_err(|_| Error::Format("rank above 255".into()))?);
        for &d in shape {
            self.len32(d)?;
        }
        Ok(())
    }

    /// dtype code, shape, raw payload.
    pub fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.u8(t.dtype().code());
        self.shape(t.shape())?;
        self.buf.extend_from_slice(&t.to_le_bytes());
        Ok(())
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            Error::Format(format!("truncated: need {n} bytes at offset {}, have {}", self.pos, self.data.len() - self.pos))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.arr()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.arr()?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub fn params(&mut self) -> Result<QuantParams> {
        let scale = self.f32()?;
        let zero_point = self.i32()?;
        let bits = self.u8()?;
        let signed = match self.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("bad signedness flag {v}"))),
        };
        QuantParams::new(scale, zero_point, bits, signed).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| self.usize()).collect()
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let dtype = DType::from_code(self.u8()?)?;
        let shape = self.shape()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = numel
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        Tensor::from_le_bytes(dtype, shape, self.take(len)?)
    }
}

pub(crate) const HEADER_LEN: usize = 10;

/// `magic, u16 version, u32 total length, payload, u32 CRC-32 of all
/// preceding bytes`.
pub(crate) fn seal(magic: &[u8; 4], version: u16, payload: &[u8]) -> Vec<u8> {
    let total = HEADER_LEN + payload.len() + 4;
    let mut bytes = Vec::with_capacity(total);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&version.to_le_bytes());
    bytes.extend_from_slice(&(total as u32).to_le_bytes());
    bytes.extend_from_slice(payload);
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

/// Verifies magic, version, length and checksum; returns the payload.
pub(crate) fn unseal<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u16) -> Result<&'a [u8]> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Format("truncated header".into()));
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(Error::Format(format!("unsupported version {found}, expected {version}")));
    }
    let declared = u32::from_le_bytes(bytes[6..10].try_into().expect("four bytes")) as usize;
    if bytes.len() < declared {
        return Err(Error::Format(format!("truncated: {} of {declared} bytes", bytes.len())));
    }
    if bytes.len() > declared {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - declared)));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(&body[HEADER_LEN..])
}
