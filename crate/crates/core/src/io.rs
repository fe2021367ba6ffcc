//! Netpbm images and the CSV conventions shared by every exported table.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format { what: "netpbm image", reason: reason.into() }
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(format!("expected a number at byte {start}")))
    }
}

/// Decodes P2/P3/P5/P6 data to gray values in [0, 1]. Color is reduced with
/// Rec. 601 luma weights.
pub fn decode_pnm(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(format_err("missing magic number"));
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'5' => (1, true),
        b'3' => (3, false),
        b'6' => (3, true),
        m => return Err(format_err(format!("unsupported format P{}", m as char))),
    };
    let mut tok = Tokens { bytes, pos: 2 };
    let width = tok.number()?;
    let height = tok.number()?;
    let maxval = tok.number()?;
    if width == 0 || height == 0 {
        return Err(format_err("empty image"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(format!("bad maxval {maxval}")));
    }
    let count = width * height * channels;
    let mut samples = Vec::with_capacity(count);
    if binary {
        let start = tok.pos + 1;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let data = bytes
            .get(start..start + need)
            .ok_or_else(|| format_err(format!("truncated raster: need {need} bytes")))?;
        if wide {
            samples.extend(data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize));
        } else {
            samples.extend(data.iter().map(|&b| b as usize));
        }
    } else {
        for _ in 0..count {
            samples.push(tok.number()?);
        }
    }
    if samples.iter().any(|&s| s > maxval) {
        return Err(format_err("sample exceeds maxval"));
    }
    let scale = maxval as f64;
    Ok(Array2::from_shape_fn((height, width), |(r, c)| {
        let k = (r * width + c) * channels;
        if channels == 1 {
            samples[k] as f64 / scale
        } else {
            (0.299 * samples[k] as f64 + 0.587 * samples[k + 1] as f64 + 0.114 * samples[k + 2] as f64) / scale
        }
    }))
}

pub fn read_image(path: &Path) -> Result<Array2<f64>> {
    decode_pnm(&std::fs::read(path)?)
}

/// Binary PGM of values already in [0, 1] (clamped).
pub fn encode_pgm_unit(values: ArrayView2<'_, f64>, comment: Option<&str>) -> Vec<u8> {
    encode(values, comment, |v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Binary PGM with `[-m, m]` mapped linearly to `[0, 255]`, `m = max|v|`.
/// Zero maps to 128; an all-zero array is uniformly 128.
pub fn encode_pgm_symmetric(values: ArrayView2<'_, f64>, comment: Option<&str>) -> Vec<u8> {
    let m = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    encode(values, comment, |v| {
        if m == 0.0 {
            128
        } else {
            (127.5 + 127.5 * v / m).round().clamp(0.0, 255.0) as u8
        }
    })
}

fn encode(values: ArrayView2<'_, f64>, comment: Option<&str>, map: impl Fn(f64) -> u8) -> Vec<u8> {
    let (rows, cols) = values.dim();
    let mut head = String::from("P5\n");
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(head, "# {line}").unwrap();
        }
    }
    write!(head, "{cols} {rows}\n255\n").unwrap();
    let mut out = head.into_bytes();
    out.extend(values.iter().map(|&v| map(v)));
    out
}

/// Lays equally sized tiles out row-major with `gap` pixels of `fill`
/// between them.
pub fn tile(tiles: &[Array2<f64>], cols: usize, gap: usize, fill: f64) -> Array2<f64> {
    if tiles.is_empty() || cols == 0 {
        return Array2::from_elem((1, 1), fill);
    }
    let (th, tw) = tiles[0].dim();
    let cols = cols.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let mut out = Array2::from_elem((rows * th + (rows - 1) * gap, cols * tw + (cols - 1) * gap), fill);
    for (k, t) in tiles.iter().enumerate() {
        let (r, c) = (k / cols * (th + gap), k % cols * (tw + gap));
        for ((i, j), v) in t.indexed_iter() {
            if i < th && j < tw {
                out[[r + i, c + j]] = *v;
            }
        }
    }
    out
}

/// Scientific notation with ten significant digits.
pub fn sci(x: f64) -> String {
    format!("{x:.9e}")
}

/// `# fconv <version> command=<command> k=v ... seed=<seed>`
pub fn header_line(command: &str, config: &[(&str, String)], seed: u64) -> String {
    let mut s = format!("# fconv {VERSION} command={command}");
    for (k, v) in config {
        write!(s, " {k}={v}").unwrap();
    }
    write!(s, " seed={seed}").unwrap();
    s
}

/// A CSV table preceded by a provenance comment line.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: String, columns: &[&str]) -> Self {
        Self { header, columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", self.header).unwrap();
        writeln!(s, "{}", self.columns.join(",")).unwrap();
        for r in &self.rows {
            writeln!(s, "{}", r.join(",")).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Format { what: "csv table", reason: reason.into() };
        let mut lines = text.lines();
        let header = lines.next().filter(|l| l.starts_with('#')).ok_or_else(|| bad("missing header comment"))?;
        let columns: Vec<String> = lines.next().ok_or_else(|| bad("missing column row"))?.split(',').map(str::to_string).collect();
        let rows: Vec<Vec<String>> = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect();
        if rows.iter().any(|r| r.len() != columns.len()) {
            return Err(bad("ragged row"));
        }
        Ok(Self { header: header.to_string(), columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k].as_str()).collect())
    }
}

/// Metadata shared by a coefficient CSV and its filter CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FitMeta {
    pub kind: String,
    pub p: usize,
    pub h: f64,
    pub t: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl FitMeta {
    fn header(&self, command: &str) -> String {
        header_line(
            command,
            &[
                ("kind", self.kind.clone()),
                ("p", self.p.to_string()),
                ("h", sci(self.h)),
                ("t", self.t.to_string()),
                ("lambda", sci(self.lambda)),
            ],
            self.seed,
        )
    }
}

/// One `index,value` row per coefficient.
pub fn coefficients_csv(meta: &FitMeta, w: &[f64]) -> String {
    let mut t = CsvTable::new(meta.header("coefficients"), &["index", "value"]);
    for (i, v) in w.iter().enumerate() {
        t.push(vec![i.to_string(), sci(*v)]);
    }
    t.render()
}

/// One `row,col,value` line per filter sample.
pub fn filter_csv(meta: &FitMeta, filter: ArrayView2<'_, f64>) -> String {
    let mut t = CsvTable::new(meta.header("filter"), &["row", "col", "value"]);
    for ((r, c), v) in filter.indexed_iter() {
        t.push(vec![r.to_string(), c.to_string(), sci(*v)]);
    }
    t.render()
}

pub fn parse_coefficients_csv(text: &str) -> Result<Vec<f64>> {
    let t = CsvTable::parse(text)?;
    let col = t.column("value").ok_or(Error::Format { what: "coefficient csv", reason: "no value column".into() })?;
    col.iter()
        .map(|v| v.parse().map_err(|_| Error::Format { what: "coefficient csv", reason: format!("bad number {v:?}") }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ascii_and_binary_gray() {
        let a = decode_pnm(b"P2\n# note\n3 2\n4\n0 1 2\n3 4 0\n").unwrap();
        assert_eq!(a, array![[0.0, 0.25, 0.5], [0.75, 1.0, 0.0]]);
        let mut raw = b"P5 2 1 255\n".to_vec();
        raw.extend([0u8, 255]);
        assert_eq!(decode_pnm(&raw).unwrap(), array![[0.0, 1.0]]);
        let mut wide = b"P5 1 1 65535\n".to_vec();
        wide.extend([0xFFu8, 0xFF]);
        assert_eq!(decode_pnm(&wide).unwrap(), array![[1.0]]);
    }

    #[test]
    fn color_reduces_to_luma() {
        let mut raw = b"P6\n1 1\n255\n".to_vec();
        raw.extend([255u8, 0, 0]);
        assert!((decode_pnm(&raw).unwrap()[[0, 0]] - 0.299).abs() < 1e-12);
        let a = decode_pnm(b"P3 1 1 255 255 255 255").unwrap();
        assert!((a[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_pnm(b"").is_err());
        assert!(decode_pnm(b"P7 1 1 255 0").is_err());
        assert!(decode_pnm(b"P5 4 4 255\n\x00").is_err());
        assert!(decode_pnm(b"P2 1 1 3 9").is_err());
        assert!(decode_pnm(b"P2 0 1 3").is_err());
    }

    #[test]
    fn symmetric_rescale() {
        let bytes = encode_pgm_symmetric(array![[-2.0, 0.0, 2.0]].view(), Some("x"));
        assert!(bytes.starts_with(b"P5\n# x\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
        let zero = encode_pgm_symmetric(Array2::zeros((2, 2)).view(), None);
        assert_eq!(&zero[zero.len() - 4..], &[128; 4]);
    }

    #[test]
    fn unit_round_trip() {
        let a = array![[0.0, 1.0], [0.2, 0.6]];
        let back = decode_pnm(&encode_pgm_unit(a.view(), None)).unwrap();
        assert!(back.iter().zip(a.iter()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn tiling_layout() {
        let t = tile(&[Array2::ones((2, 2)), Array2::ones((2, 2)) * 2.0, Array2::ones((2, 2)) * 3.0], 2, 1, 0.0);
        assert_eq!(t.dim(), (5, 5));
        assert_eq!(t[[0, 3]], 2.0);
        assert_eq!(t[[2, 0]], 0.0);
        assert_eq!(t[[3, 1]], 3.0);
        assert_eq!(t[[4, 4]], 0.0);
    }

    #[test]
    fn csv_pair_round_trip() {
        let meta = FitMeta { kind: "proposed".into(), p: 3, h: 0.5, t: 1, lambda: 1e-10, seed: 7 };
        let w = vec![1.0, -2.5e-7, std::f64::consts::PI];
        let text = coefficients_csv(&meta, &w);
        assert!(text.starts_with("# fconv "));
        assert!(text.contains("seed=7"));
        let back = parse_coefficients_csv(&text).unwrap();
        for (a, b) in back.iter().zip(&w) {
            assert!((a - b).abs() <= 1e-9 * b.abs());
        }
        let f = filter_csv(&meta, Array2::eye(2).view());
        assert_eq!(f.lines().count(), 6);
        assert_eq!(f.lines().nth(2), Some("0,0,1.000000000e0"));
    }

    #[test]
    fn sci_keeps_ten_digits() {
        assert_eq!(sci(0.041), "4.100000000e-2");
        assert_eq!(sci(-1234567.891), "-1.234567891e6");
    }
}
