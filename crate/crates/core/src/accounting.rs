//! Exact storage and BOPs accounting for binarized layers.
//!
//! All quantities are integers. A sub-bit layer with a sub-codebook of `n`
//! words stores `log2(n)` bits per kernel, and its convolution runs as a
//! codeword lookup table (`BOPs₁`) followed by an index gather (`BOPs₂`).

use std::fmt::Write as _;
use std::str::FromStr;

use num_rational::Ratio;

use crate::error::{Result, SparksError};

fn acct_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SparksError::Accounting(msg.into()))
}

/// One row of an architecture table. A kernel of `0×0` marks a dense layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_w: u64,
    pub in_h: u64,
    pub in_c: u64,
    pub out_w: u64,
    pub out_h: u64,
    pub out_c: u64,
    pub k_w: u64,
    pub k_h: u64,
    pub binarized: bool,
}

impl LayerSpec {
    pub fn conv(name: &str, input: (u64, u64, u64), output: (u64, u64, u64), k: u64, binarized: bool) -> Self {
        LayerSpec {
            name: name.to_string(),
            in_w: input.0,
            in_h: input.1,
            in_c: input.2,
            out_w: output.0,
            out_h: output.1,
            out_c: output.2,
            k_w: k,
            k_h: k,
            binarized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.in_w, self.in_h, self.in_c, self.out_w, self.out_h, self.out_c];
        if dims.contains(&0) {
            return acct_err(format!("layer {}: dimensions must be positive", self.name));
        }
        if (self.k_w == 0) != (self.k_h == 0) {
            return acct_err(format!("layer {}: kernel {}x{} is half empty", self.name, self.k_w, self.k_h));
        }
        if self.binarized && self.k_w == 0 {
            return acct_err(format!("layer {}: a binarized layer needs a kernel", self.name));
        }
        Ok(())
    }

    pub fn is_dense(&self) -> bool {
        self.k_w == 0
    }

    fn kernel_area(&self) -> u64 {
        self.k_w * self.k_h
    }
}

/// Bit-width setting of a binarized layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    OneBit,
    /// Sub-codebook with `n` codewords.
    SubBit(u64),
}

impl Mode {
    /// The four settings of the ResNet-18 table: 1 bit, n = 128, 64, 32.
    pub const TABLE: [Mode; 4] = [Mode::OneBit, Mode::SubBit(128), Mode::SubBit(64), Mode::SubBit(32)];

    pub fn label(&self) -> String {
        match self {
            Mode::OneBit => "1bit".to_string(),
            Mode::SubBit(n) => format!("n{n}"),
        }
    }
}

impl FromStr for Mode {
    type Err = SparksError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1bit" | "1" => Ok(Mode::OneBit),
            other => {
                let digits = other.strip_prefix('n').unwrap_or(other);
                digits
                    .parse()
                    .map(Mode::SubBit)
                    .map_err(|_| SparksError::Accounting(format!("unknown mode {s:?}")))
            }
        }
    }
}

/// `log2(n)` when `n` is a valid sub-codebook size for this layer.
fn index_bits(layer: &LayerSpec, n: u64) -> Result<u64> {
    if layer.k_w != layer.k_h {
        return acct_err(format!("layer {}: sub-bit mode needs a square kernel", layer.name));
    }
    let area = layer.kernel_area();
    if !n.is_power_of_two() || n < 2 || (area < 64 && n > 1u64 << area) {
        return acct_err(format!("layer {}: n = {n} is not a power of two in [2, 2^{area}]", layer.name));
    }
    Ok(u64::from(n.trailing_zeros()))
}

/// Weight storage in bits; `None` for layers that stay real-valued.
pub fn storage_bits(layer: &LayerSpec, mode: Mode) -> Result<Option<u64>> {
    layer.validate()?;
    if !layer.binarized {
        return Ok(None);
    }
    let one_bit = layer.out_c * layer.in_c * layer.kernel_area();
    match mode {
        Mode::OneBit => Ok(Some(one_bit)),
        Mode::SubBit(n) => {
            let bits = index_bits(layer, n)?;
            let num = one_bit * bits;
            if !num.is_multiple_of(layer.kernel_area()) {
                return acct_err(format!("layer {}: storage is not an integer", layer.name));
            }
            Ok(Some(num / layer.kernel_area()))
        }
    }
}

/// Binary operations of one forward pass; `None` for real-valued layers.
pub fn bops(layer: &LayerSpec, mode: Mode) -> Result<Option<u64>> {
    layer.validate()?;
    if !layer.binarized {
        return Ok(None);
    }
    let positions = layer.in_c * layer.out_h * layer.out_w;
    let base = positions * layer.kernel_area() * layer.out_c;
    match mode {
        Mode::OneBit => Ok(Some(base)),
        Mode::SubBit(n) => {
            index_bits(layer, n)?;
            let (lut, gather) = lut_bops_parts(layer, n);
            Ok(Some(base.min(lut + gather)))
        }
    }
}

/// `(BOPs₁, BOPs₂)` of the lookup-table path, before clamping to the 1-bit cost.
pub fn lut_bops_parts(layer: &LayerSpec, n: u64) -> (u64, u64) {
    let positions = layer.in_c * layer.out_h * layer.out_w;
    let lut = positions * layer.kernel_area() * n;
    let twice = layer.out_c * (positions - 1);
    if !twice.is_multiple_of(2) {
        log::warn!("layer {}: odd gather cost {twice}/2 floored", layer.name);
    }
    (lut, twice / 2)
}

/// Exact compression ratio `log2(n) / K²` relative to 1 bit per weight.
pub fn compression_ratio(n: u64, kernel_size: u64) -> Result<Ratio<u64>> {
    let area = kernel_size * kernel_size;
    if area == 0 || !n.is_power_of_two() || n < 2 || (area < 64 && n > 1u64 << area) {
        return acct_err(format!("n = {n} is not a valid sub-codebook size for K = {kernel_size}"));
    }
    Ok(Ratio::new(u64::from(n.trailing_zeros()), area))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportRow {
    pub name: String,
    pub storage: Vec<Option<u64>>,
    pub bops: Vec<Option<u64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccountingReport {
    pub modes: Vec<Mode>,
    pub rows: Vec<ReportRow>,
    pub total_storage: Vec<u64>,
    pub total_bops: Vec<u64>,
}

pub fn report(arch: &[LayerSpec], modes: &[Mode]) -> Result<AccountingReport> {
    if arch.is_empty() {
        return acct_err("architecture has no layers");
    }
    if modes.is_empty() {
        return acct_err("no modes requested");
    }
    let mut rows = Vec::with_capacity(arch.len());
    let mut total_storage = vec![0u64; modes.len()];
    let mut total_bops = vec![0u64; modes.len()];
    for layer in arch {
        let mut row = ReportRow {
            name: layer.name.clone(),
            storage: Vec::with_capacity(modes.len()),
            bops: Vec::with_capacity(modes.len()),
        };
        for (m, &mode) in modes.iter().enumerate() {
            let s = storage_bits(layer, mode)?;
            let b = bops(layer, mode)?;
            total_storage[m] += s.unwrap_or(0);
            total_bops[m] += b.unwrap_or(0);
            row.storage.push(s);
            row.bops.push(b);
        }
        rows.push(row);
    }
    Ok(AccountingReport {
        modes: modes.to_vec(),
        rows,
        total_storage,
        total_bops,
    })
}

fn cell(v: Option<u64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

impl AccountingReport {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["layer".to_string()];
        h.extend(self.modes.iter().map(|m| format!("storage_{}", m.label())));
        h.extend(self.modes.iter().map(|m| format!("bops_{}", m.label())));
        h
    }

    fn body(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.name.clone()];
                line.extend(r.storage.iter().map(|&v| cell(v)));
                line.extend(r.bops.iter().map(|&v| cell(v)));
                line
            })
            .collect();
        let mut total = vec!["total".to_string()];
        total.extend(self.total_storage.iter().map(u64::to_string));
        total.extend(self.total_bops.iter().map(u64::to_string));
        out.push(total);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        for line in self.body() {
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Right-aligned plain text table.
    pub fn to_text(&self) -> String {
        let mut lines = vec![self.header()];
        lines.extend(self.body());
        let cols = lines[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for line in &lines {
            for (c, field) in line.iter().enumerate() {
                if c == 0 {
                    let _ = write!(s, "{field:<w$}", w = widths[0]);
                } else {
                    let _ = write!(s, "  {field:>w$}", w = widths[c]);
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Parses `name in_w in_h in_c out_w out_h out_c k_w k_h binarized` lines.
/// Blank lines and `#` comments are skipped; a `-` kernel field reads as 0.
pub fn parse_arch(text: &str) -> Result<Vec<LayerSpec>> {
    let mut layers = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return acct_err(format!("line {}: expected 10 fields, got {}", lineno + 1, fields.len()));
        }
        let num = |i: usize| -> Result<u64> {
            if i >= 7 && fields[i] == "-" {
                return Ok(0);
            }
            fields[i]
                .parse()
                .map_err(|_| SparksError::Accounting(format!("line {}: bad number {:?}", lineno + 1, fields[i])))
        };
        let binarized = match fields[9] {
            "0" => false,
            "1" => true,
            other => return acct_err(format!("line {}: binarized flag must be 0 or 1, got {other:?}", lineno + 1)),
        };
        let layer = LayerSpec {
            name: fields[0].to_string(),
            in_w: num(1)?,
            in_h: num(2)?,
            in_c: num(3)?,
            out_w: num(4)?,
            out_h: num(5)?,
            out_c: num(6)?,
            k_w: num(7)?,
            k_h: num(8)?,
            binarized,
        };
        layer.validate()?;
        layers.push(layer);
    }
    if layers.is_empty() {
        return acct_err("architecture file has no layers");
    }
    Ok(layers)
}

/// ResNet-18 at 224×224 input; first conv and classifier stay real-valued.
pub fn resnet18() -> Vec<LayerSpec> {
    let mut arch = vec![LayerSpec::conv("conv1", (224, 224, 3), (112, 112, 64), 7, false)];
    let stages = [(2u32, 56u64, 64u64), (3, 28, 128), (4, 14, 256), (5, 7, 512)];
    for (stage, side, ch) in stages {
        for (block, half) in [(1, 'a'), (1, 'b'), (2, 'a'), (2, 'b')] {
            let name = format!("conv{stage}-{block}{half}");
            let input = if stage > 2 && block == 1 && half == 'a' {
                (side * 2, side * 2, ch / 2)
            } else {
                (side, side, ch)
            };
            arch.push(LayerSpec::conv(&name, input, (side, side, ch), 3, true));
        }
    }
    arch.push(LayerSpec {
        name: "fc1000".to_string(),
        in_w: 1,
        in_h: 1,
        in_c: 512,
        out_w: 1,
        out_h: 1,
        out_c: 1000,
        k_w: 0,
        k_h: 0,
        binarized: false,
    });
    arch
}

/// Serializes an architecture back into the line format read by [`parse_arch`].
pub fn format_arch(arch: &[LayerSpec]) -> String {
    let mut s = String::new();
    for l in arch {
        let k = |v: u64| if v == 0 { "-".to_string() } else { v.to_string() };
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {}",
            l.name,
            l.in_w,
            l.in_h,
            l.in_c,
            l.out_w,
            l.out_h,
            l.out_c,
            k(l.k_w),
            k(l.k_h),
            u8::from(l.binarized)
        );
    }
    s
}
