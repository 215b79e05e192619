use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named, contiguous, disjoint segments covering a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl SegmentLayout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSegment(name.to_string()))
    }

    fn validate(&self) -> Result<()> {
        let mut next = 0;
        for s in &self.segments {
            if s.offset != next {
                return Err(Error::Layout(format!(
                    "segment `{}` starts at {} but previous ends at {next}",
                    s.name, s.offset
                )));
            }
            next += s.len();
        }
        if next != self.total {
            return Err(Error::Layout(format!(
                "segments cover {next} values, layout declares {}",
                self.total
            )));
        }
        for (i, a) in self.segments.iter().enumerate() {
            if self.segments[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Layout(format!("duplicate segment `{}`", a.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    total: usize,
}

impl LayoutBuilder {
    pub fn push(mut self, name: impl Into<String>, shape: &[usize]) -> Self {
        let seg = Segment {
            name: name.into(),
            offset: self.total,
            shape: shape.to_vec(),
        };
        self.total += seg.len();
        self.segments.push(seg);
        self
    }

    pub fn build(self) -> Result<Arc<SegmentLayout>> {
        let layout = SegmentLayout {
            segments: self.segments,
            total: self.total,
        };
        layout.validate()?;
        Ok(Arc::new(layout))
    }
}

/// Flat parameter array with a gradient buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    layout: Arc<SegmentLayout>,
    values: Vec<T>,
    grads: Vec<T>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(layout: Arc<SegmentLayout>) -> Self {
        let n = layout.total();
        Self {
            layout,
            values: vec![T::zero(); n],
            grads: vec![T::zero(); n],
        }
    }

    pub fn from_values(layout: Arc<SegmentLayout>, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Layout(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total()
            )));
        }
        let n = values.len();
        Ok(Self {
            layout,
            values,
            grads: vec![T::zero(); n],
        })
    }

    /// Matrices (rank ≥ 2) are drawn uniformly from ±√(6/(fan_in+fan_out));
    /// vectors (biases) start at zero.
    pub fn glorot(layout: Arc<SegmentLayout>, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(layout);
        let segs = p.layout.segments().to_vec();
        for s in segs {
            if s.shape.len() < 2 {
                continue;
            }
            let fan_out = s.shape[0];
            let fan_in: usize = s.shape[1..].iter().product();
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.values[s.range()] {
                *v = T::lit(rng.random_range(-a..=a));
            }
        }
        p
    }

    pub fn layout(&self) -> &Arc<SegmentLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grads(&self) -> &[T] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [T] {
        &mut self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn segment(&self, name: &str) -> Result<&[T]> {
        let s = self.layout.get(name)?;
        Ok(&self.values[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let r = self.layout.get(name)?.range();
        Ok(&mut self.values[r])
    }

    pub fn segment_grad(&self, name: &str) -> Result<&[T]> {
        let s = self.layout.get(name)?;
        Ok(&self.grads[s.range()])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout("parameter vectors have different layouts".into()))
        }
    }

    /// Euclidean distance between value arrays.
    pub fn distance(&self, other: &Self) -> Result<T> {
        self.check_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt())
    }

    /// Serializes as `[u64 LE header length][JSON header][f64 LE values]`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = WireHeader {
            count: self.values.len(),
            segments: self.layout.segments().to_vec(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in &self.values {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 * self.values.len() + 256);
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let hlen = u64::from_le_bytes(len) as usize;
        if hlen > 64 << 20 {
            return Err(Error::Layout(format!("implausible header length {hlen}")));
        }
        let mut json = vec![0u8; hlen];
        r.read_exact(&mut json)?;
        let header: WireHeader = serde_json::from_slice(&json)?;
        let layout = SegmentLayout {
            total: header.count,
            segments: header.segments,
        };
        layout.validate()?;
        let mut values = Vec::with_capacity(header.count);
        let mut buf = [0u8; 8];
        for _ in 0..header.count {
            r.read_exact(&mut buf)?;
            values.push(T::lit(f64::from_le_bytes(buf)));
        }
        Self::from_values(Arc::new(layout), values)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    /// Byte length of the serialized form; used as the model upload size.
    pub fn wire_size(&self) -> usize {
        let header = WireHeader {
            count: self.values.len(),
            segments: self.layout.segments().to_vec(),
        };
        8 + serde_json::to_vec(&header).map(|v| v.len()).unwrap_or(0) + 8 * self.values.len()
    }
}

#[derive(Serialize, Deserialize)]
struct WireHeader {
    count: usize,
    segments: Vec<Segment>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> Arc<SegmentLayout> {
        SegmentLayout::builder()
            .push("w", &[3, 4])
            .push("b", &[3])
            .build()
            .unwrap()
    }

    #[test]
    fn layout_covers_array() {
        let l = layout();
        assert_eq!(l.total(), 15);
        assert_eq!(l.get("b").unwrap().range(), 12..15);
        assert!(l.get("nope").is_err());
    }

    #[test]
    fn duplicate_segment_rejected() {
        let r = SegmentLayout::builder().push("a", &[2]).push("a", &[1]).build();
        assert!(r.is_err());
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ParamVector::<f64>::glorot(layout(), &mut rng);
        let a = (6.0f64 / 7.0).sqrt();
        assert!(p.segment("w").unwrap().iter().all(|v| v.abs() <= a));
        assert!(p.segment("b").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wire_format_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ParamVector::<f64>::glorot(layout(), &mut rng);
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), p.wire_size());
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let tail = &bytes[8 + hlen..];
        assert_eq!(tail.len(), 15 * 8);
        assert_eq!(f64::from_le_bytes(tail[..8].try_into().unwrap()), p.values()[0]);
        let q = ParamVector::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(p.values(), q.values());
        assert_eq!(**p.layout(), **q.layout());
    }

    #[test]
    fn truncated_bytes_error() {
        let p = ParamVector::<f64>::zeros(layout());
        let bytes = p.to_bytes();
        assert!(ParamVector::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
