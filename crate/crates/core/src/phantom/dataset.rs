//! Binary dataset container.
//!
//! ```text
//! "SEGS" | version u8 = 1 | n_subjects u32
//! per subject:
//!   S u8 | T u8 | H u16 | W u16 | y u8 | K u8 | y_k K×u8 | seed u64
//!   6 × f64: contraction_amplitude, sf_amplitude, hidden_factor,
//!            base_radius, center_x, center_y
//!   S·T·H·W label bytes, slice-major then frame, row, column
//! ```
//!
//! All integers and floats are little-endian. A JSON sidecar with the same
//! basename and a `.meta.json` extension mirrors the labels and factors for
//! inspection; the binary file is authoritative.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{GenerativeFactors, LabeledSubject, SegFrame, SegSequence, NUM_CLASSES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SEGS";
pub const VERSION: u8 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

#[derive(Serialize)]
struct SidecarEntry<'a> {
    index: usize,
    seed: u64,
    y: u8,
    y_k: &'a [u8],
    frames: usize,
    factors: &'a GenerativeFactors,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format: &'static str,
    version: u8,
    n_subjects: usize,
    subjects: Vec<SidecarEntry<'a>>,
}

pub fn save_dataset(subjects: &[LabeledSubject], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(subjects, &mut w)?;
    w.flush()?;

    let sidecar = Sidecar {
        format: "SEGS",
        version: VERSION,
        n_subjects: subjects.len(),
        subjects: subjects
            .iter()
            .enumerate()
            .map(|(index, s)| SidecarEntry {
                index,
                seed: s.seed,
                y: s.y,
                y_k: &s.y_k,
                frames: s.sequence.len(),
                factors: &s.factors,
            })
            .collect(),
    };
    let mut f = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(&mut f, &sidecar)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn narrow<T: TryFrom<usize>>(field: &str, v: usize) -> Result<T> {
    T::try_from(v).map_err(|_| Error::format(field, format!("{v} does not fit the header field")))
}

pub fn write_dataset<W: Write>(subjects: &[LabeledSubject], w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&narrow::<u32>("n_subjects", subjects.len())?.to_le_bytes())?;
    for s in subjects {
        let (slices, height, width) = s.sequence.shape();
        let t = s.sequence.len();
        w.write_all(&[narrow::<u8>("S", slices)?, narrow::<u8>("T", t)?])?;
        w.write_all(&narrow::<u16>("H", height)?.to_le_bytes())?;
        w.write_all(&narrow::<u16>("W", width)?.to_le_bytes())?;
        w.write_all(&[s.y, narrow::<u8>("K", s.y_k.len())?])?;
        w.write_all(&s.y_k)?;
        w.write_all(&s.seed.to_le_bytes())?;
        let f = &s.factors;
        for v in [
            f.contraction_amplitude,
            f.sf_amplitude,
            f.hidden_factor,
            f.base_radius,
            f.center_x,
            f.center_y,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for slice in 0..slices {
            for frame in &s.sequence.frames {
                if frame.shape() != (slices, height, width) {
                    return Err(Error::format("frames", "frames differ in shape"));
                }
                w.write_all(frame.slice(slice))?;
            }
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledSubject>> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset(&mut r)
}

struct Reader<'a, R: Read> {
    inner: &'a mut R,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, field: &str, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(field, "file truncated")
            } else {
                Error::Io(e)
            }
        })
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(field, &mut b)?;
        Ok(b[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.bytes(field, &mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(field, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(field, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(field)?))
    }
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Vec<LabeledSubject>> {
    let mut rd = Reader { inner: r };
    let mut magic = [0u8; 4];
    rd.bytes("magic", &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected {:?}, found {:?}", MAGIC, magic),
        ));
    }
    let version = rd.u8("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let n = rd.u32("n_subjects")? as usize;
    let mut subjects = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let field = |name: &str| format!("subject[{i}].{name}");
        let slices = rd.u8(&field("S"))? as usize;
        let t = rd.u8(&field("T"))? as usize;
        let height = rd.u16(&field("H"))? as usize;
        let width = rd.u16(&field("W"))? as usize;
        if slices == 0 || t == 0 || height == 0 || width == 0 {
            return Err(Error::format(field("dimensions"), "zero-sized dimension"));
        }
        let y = rd.u8(&field("y"))?;
        if y > 1 {
            return Err(Error::format(field("y"), format!("label {y} is not binary")));
        }
        let k = rd.u8(&field("K"))? as usize;
        let mut y_k = vec![0u8; k];
        rd.bytes(&field("y_k"), &mut y_k)?;
        if y_k.iter().any(|&v| v > 1) {
            return Err(Error::format(field("y_k"), "concept label is not binary"));
        }
        let seed = rd.u64(&field("seed"))?;
        let factors = GenerativeFactors {
            contraction_amplitude: rd.f64(&field("factors"))?,
            sf_amplitude: rd.f64(&field("factors"))?,
            hidden_factor: rd.f64(&field("factors"))?,
            base_radius: rd.f64(&field("factors"))?,
            center_x: rd.f64(&field("factors"))?,
            center_y: rd.f64(&field("factors"))?,
        };
        // read before allocating frames so a corrupted size cannot demand
        // more memory than the file holds
        let plane = height * width;
        let total = slices * t * plane;
        let mut raw = Vec::new();
        rd.inner.by_ref().take(total as u64).read_to_end(&mut raw)?;
        if raw.len() < total {
            return Err(Error::format(field("labels"), "file truncated"));
        }
        let mut frames = vec![SegFrame::empty(slices, height, width); t];
        for (j, chunk) in raw.chunks_exact(plane).enumerate() {
            frames[j % t].slice_mut(j / t).copy_from_slice(chunk);
        }
        if frames
            .iter()
            .any(|f| f.labels.iter().any(|&l| l as usize >= NUM_CLASSES))
        {
            return Err(Error::format(field("labels"), "class id outside 0..4"));
        }
        subjects.push(LabeledSubject {
            sequence: SegSequence::uniform(frames),
            y,
            y_k,
            factors,
            seed,
        });
    }
    let mut extra = [0u8; 1];
    if rd.inner.read(&mut extra)? != 0 {
        return Err(Error::format("trailer", "unexpected bytes after the last subject"));
    }
    Ok(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort_shaped, CohortSpec, FrameShape};

    fn small_cohort() -> Vec<LabeledSubject> {
        let spec = CohortSpec {
            n_subjects: 6,
            ..CohortSpec::default()
        };
        let shape = FrameShape {
            slices: 2,
            height: 16,
            width: 16,
        };
        generate_cohort_shaped(&spec, shape, 3, 11).unwrap()
    }

    fn encode(subjects: &[LabeledSubject]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(subjects, &mut buf).unwrap();
        buf
    }

    #[test]
    fn roundtrip_in_memory() {
        let cohort = small_cohort();
        let buf = encode(&cohort);
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back, cohort);
    }

    #[test]
    fn header_layout() {
        let cohort = small_cohort();
        let buf = encode(&cohort);
        assert_eq!(&buf[..4], b"SEGS");
        assert_eq!(buf[4], 1);
        assert_eq!(u32::from_le_bytes(buf[5..9].try_into().unwrap()), 6);
        // S, T, H, W of the first subject
        assert_eq!(buf[9], 2);
        assert_eq!(buf[10], 3);
        assert_eq!(u16::from_le_bytes([buf[11], buf[12]]), 16);
        let per_subject = 1 + 1 + 2 + 2 + 1 + 1 + 1 + 8 + 48 + 2 * 3 * 16 * 16;
        assert_eq!(buf.len(), 9 + 6 * per_subject);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let buf = encode(&small_cohort()[..1]);
        for cut in 0..buf.len() {
            match read_dataset(&mut &buf[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut buf = encode(&small_cohort());
        buf[0] = b'X';
        match read_dataset(&mut buf.as_slice()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("{other:?}"),
        }
        let mut buf = encode(&small_cohort());
        buf[4] = 9;
        match read_dataset(&mut buf.as_slice()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "version"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut buf = encode(&small_cohort());
        buf[9] = 0;
        match read_dataset(&mut buf.as_slice()) {
            Err(Error::Format { field, .. }) => assert!(field.contains("dimensions")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oversized_dimensions_and_trailing_bytes() {
        let mut buf = encode(&small_cohort());
        buf[11] = 0xff;
        buf[12] = 0xff;
        match read_dataset(&mut buf.as_slice()) {
            Err(Error::Format { field, .. }) => assert!(field.starts_with("subject["), "{field}"),
            other => panic!("{other:?}"),
        }
        let mut buf = encode(&small_cohort());
        buf[5] -= 1;
        match read_dataset(&mut buf.as_slice()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "trailer"),
            other => panic!("{other:?}"),
        }
    }
}
