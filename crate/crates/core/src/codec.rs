//! Bitmask-expansion compressed weights.
//!
//! A matrix is cut into 16-lane blocks. Each block stores a 16-bit mask with
//! one bit per lane and, densely, the values of the lanes whose bit is set.
//! Lane 0 is the most significant bit of the mask, so a mask written out in
//! binary reads left to right in lane order.
//!
//! Two block layouts exist:
//!
//! * [`BlockLayout::RowPair16`]: two rows by eight columns, interleaved so
//!   that lane `2k` holds row A column `k` and lane `2k + 1` holds row B
//!   column `k`. Blocks are ordered row-pair major, then by column block.
//! * [`BlockLayout::Tile`]: the matrix is cut into `rows × cols` tiles (tile
//!   columns a multiple of 16) visited in row-major tile order; inside a tile
//!   every row is split into 16-lane segments.
//!
//! Ragged edges are zero padded and padded lanes always have a clear bit.
//!
//! # Container
//!
//! All integers little-endian.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `SPKT`                            |
//! | 4      | 2    | format version (1)                      |
//! | 6      | 1    | layout (0 = row-pair 2×8, 1 = tile)     |
//! | 7      | 1    | dtype (0 = f32, 1 = i8, 2 = i16)        |
//! | 8      | 4    | rows                                    |
//! | 12     | 4    | cols                                    |
//! | 16     | 2    | tile rows (0 for row-pair)              |
//! | 18     | 2    | tile cols (0 for row-pair)              |
//! | 20     | 4    | block count                             |
//! | 24     | 8    | number of stored values                 |
//! | 32     | ...  | blocks: `u16` mask, then its values     |

use alloc::format;
use alloc::vec::Vec;
use core::fmt::{self, Debug};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const LANES: usize = 16;
pub const MAGIC: [u8; 4] = *b"SPKT";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
/// Bytes of mask stored per block.
pub const MASK_BYTES: usize = 2;

/// Storage type of the nonzero values. One dtype per matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    I8,
    I16,
}

impl Dtype {
    pub const fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I8 => 1,
            Dtype::I16 => 2,
        }
    }

    pub const fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::I8 => 1,
            Dtype::I16 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::I8),
            2 => Ok(Dtype::I16),
            t => Err(Error::Corrupt(format!("unknown dtype tag {t}"))),
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::I8 => "i8",
            Dtype::I16 => "i16",
        }
    }
}

/// Element types that can be stored in a [`SparseMatrix`].
pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: Dtype;
    /// A lane is stored iff this returns true. For floats this compares the
    /// bit pattern, so `-0.0` is kept and round-trips exactly.
    fn is_stored(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` has exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline]
    fn is_stored(self) -> bool {
        self.to_bits() != 0
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for i8 {
    const DTYPE: Dtype = Dtype::I8;
    #[inline]
    fn is_stored(self) -> bool {
        self != 0
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self as u8);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0] as i8
    }
}

impl Element for i16 {
    const DTYPE: Dtype = Dtype::I16;
    #[inline]
    fn is_stored(self) -> bool {
        self != 0
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        i16::from_le_bytes([bytes[0], bytes[1]])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockLayout {
    RowPair16,
    Tile { rows: u16, cols: u16 },
}

impl BlockLayout {
    pub const TILE_16X16: BlockLayout = BlockLayout::Tile { rows: 16, cols: 16 };

    pub const fn tag(self) -> u8 {
        match self {
            BlockLayout::RowPair16 => 0,
            BlockLayout::Tile { .. } => 1,
        }
    }

    pub fn validate(self) -> Result<()> {
        if let BlockLayout::Tile { rows, cols } = self {
            if rows == 0 || cols == 0 || !(cols as usize).is_multiple_of(LANES) {
                return Err(Error::invalid(
                    "layout",
                    format!("tile {rows}x{cols}: rows must be >= 1 and cols a positive multiple of 16"),
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for BlockLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockLayout::RowPair16 => f.write_str("rowpair16"),
            BlockLayout::Tile { rows, cols } => write!(f, "tile{rows}x{cols}"),
        }
    }
}

/// One compressed 16-lane block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitmaskBlock<T> {
    pub bitmask: u16,
    pub values: Vec<T>,
}

/// Borrowed view of a block inside a [`SparseMatrix`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockRef<'a, T> {
    pub bitmask: u16,
    pub values: &'a [T],
}

#[inline]
const fn lane_bit(lane: usize) -> u16 {
    1u16 << (LANES - 1 - lane)
}

/// Lays two 8-wide row segments out as lanes: `2k` from `row_a`, `2k + 1`
/// from `row_b`.
pub fn interleave_rowpair<T: Copy>(row_a: &[T; 8], row_b: &[T; 8]) -> [T; LANES] {
    let mut lanes = [row_a[0]; LANES];
    for k in 0..8 {
        lanes[2 * k] = row_a[k];
        lanes[2 * k + 1] = row_b[k];
    }
    lanes
}

pub fn encode_block<T: Element>(lanes: &[T; LANES]) -> BitmaskBlock<T> {
    let mut bitmask = 0u16;
    let mut values = Vec::new();
    for (i, &v) in lanes.iter().enumerate() {
        if v.is_stored() {
            bitmask |= lane_bit(i);
            values.push(v);
        }
    }
    BitmaskBlock { bitmask, values }
}

pub fn decode_block<T: Element>(block: &BitmaskBlock<T>) -> Result<[T; LANES]> {
    expand(block.bitmask, &block.values)
}

fn expand<T: Element>(bitmask: u16, values: &[T]) -> Result<[T; LANES]> {
    if bitmask.count_ones() as usize != values.len() {
        return Err(Error::Corrupt(format!(
            "bitmask {bitmask:#018b} has {} set lanes but {} values are stored",
            bitmask.count_ones(),
            values.len()
        )));
    }
    let mut lanes = [T::default(); LANES];
    let mut next = values.iter();
    for (i, lane) in lanes.iter_mut().enumerate() {
        if bitmask & lane_bit(i) != 0 {
            // count checked above
            *lane = *next.next().unwrap();
        }
    }
    Ok(lanes)
}

/// Block-compressed matrix. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    layout: BlockLayout,
    masks: Vec<u16>,
    values: Vec<T>,
    /// Index into `values` of each block's first value.
    offsets: Vec<u32>,
}

/// Block grid of a layout applied to a `rows × cols` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub rows: usize,
    pub cols: usize,
    pub layout: BlockLayout,
}

impl Geometry {
    pub fn block_count(&self) -> usize {
        match self.layout {
            BlockLayout::RowPair16 => self.rows.div_ceil(2) * self.cols.div_ceil(8),
            BlockLayout::Tile { rows: tr, cols: tc } => {
                let (tr, tc) = (tr as usize, tc as usize);
                self.rows.div_ceil(tr) * tr * self.cols.div_ceil(tc) * (tc / LANES)
            }
        }
    }

    /// Lanes of block `b` that fall outside the matrix, as mask bits.
    fn padding_bits(&self, b: usize) -> u16 {
        match self.layout {
            BlockLayout::RowPair16 => {
                let col_blocks = self.cols.div_ceil(8);
                let (rp, cb) = (b / col_blocks, b % col_blocks);
                let mut pad = 0u16;
                if 2 * rp + 1 >= self.rows {
                    pad |= 0x5555;
                }
                let valid = (self.cols - cb * 8).min(8);
                for k in valid..8 {
                    pad |= lane_bit(2 * k) | lane_bit(2 * k + 1);
                }
                pad
            }
            BlockLayout::Tile { rows: tr, cols: tc } => {
                let (tr, tc) = (tr as usize, tc as usize);
                let segs = tc / LANES;
                let tile_cols = self.cols.div_ceil(tc);
                let per_tile = tr * segs;
                let tile = b / per_tile;
                let within = b % per_tile;
                let (ti, tj) = (tile / tile_cols, tile % tile_cols);
                let (r, s) = (within / segs, within % segs);
                if ti * tr + r >= self.rows {
                    return u16::MAX;
                }
                let c0 = tj * tc + s * LANES;
                let valid = self.cols.saturating_sub(c0).min(LANES);
                let mut pad = 0u16;
                for l in valid..LANES {
                    pad |= lane_bit(l);
                }
                pad
            }
        }
    }
}

impl<T: Element> SparseMatrix<T> {
    pub fn encode(m: &Matrix<T>, layout: BlockLayout) -> Result<Self> {
        layout.validate()?;
        let (rows, cols) = m.shape();
        let geo = Geometry { rows, cols, layout };
        let mut masks = Vec::with_capacity(geo.block_count());
        let mut values = Vec::new();
        let mut push = |lanes: &[T; LANES]| {
            let mut mask = 0u16;
            for (i, &v) in lanes.iter().enumerate() {
                if v.is_stored() {
                    mask |= lane_bit(i);
                    values.push(v);
                }
            }
            masks.push(mask);
        };
        let zero = T::default();
        match layout {
            BlockLayout::RowPair16 => {
                for rp in 0..rows.div_ceil(2) {
                    let ra = m.row(2 * rp);
                    let rb = if 2 * rp + 1 < rows { Some(m.row(2 * rp + 1)) } else { None };
                    for cb in 0..cols.div_ceil(8) {
                        let mut lanes = [zero; LANES];
                        for k in 0..8 {
                            let c = cb * 8 + k;
                            if c < cols {
                                lanes[2 * k] = ra[c];
                                if let Some(rb) = rb {
                                    lanes[2 * k + 1] = rb[c];
                                }
                            }
                        }
                        push(&lanes);
                    }
                }
            }
            BlockLayout::Tile { rows: tr, cols: tc } => {
                let (tr, tc) = (tr as usize, tc as usize);
                for ti in 0..rows.div_ceil(tr) {
                    for tj in 0..cols.div_ceil(tc) {
                        for r in 0..tr {
                            let row = ti * tr + r;
                            for s in 0..tc / LANES {
                                let mut lanes = [zero; LANES];
                                if row < rows {
                                    let c0 = tj * tc + s * LANES;
                                    let src = m.row(row);
                                    for (l, lane) in lanes.iter_mut().enumerate() {
                                        if c0 + l < cols {
                                            *lane = src[c0 + l];
                                        }
                                    }
                                }
                                push(&lanes);
                            }
                        }
                    }
                }
            }
        }
        let offsets = prefix_offsets(&masks)?;
        Ok(SparseMatrix { rows, cols, layout, masks, values, offsets })
    }

    /// Assembles a matrix from explicit blocks, validating counts and padding.
    pub fn from_blocks(
        rows: usize,
        cols: usize,
        layout: BlockLayout,
        blocks: Vec<BitmaskBlock<T>>,
    ) -> Result<Self> {
        let mut masks = Vec::with_capacity(blocks.len());
        let mut values = Vec::new();
        for (i, b) in blocks.into_iter().enumerate() {
            if b.bitmask.count_ones() as usize != b.values.len() {
                return Err(Error::Corrupt(format!(
                    "block {i}: bitmask popcount {} but {} values",
                    b.bitmask.count_ones(),
                    b.values.len()
                )));
            }
            masks.push(b.bitmask);
            values.extend(b.values);
        }
        Self::from_raw(rows, cols, layout, masks, values)
    }

    fn from_raw(
        rows: usize,
        cols: usize,
        layout: BlockLayout,
        masks: Vec<u16>,
        values: Vec<T>,
    ) -> Result<Self> {
        layout.validate()?;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape { rows, cols, reason: "dimensions must be >= 1" });
        }
        let geo = Geometry { rows, cols, layout };
        if masks.len() != geo.block_count() {
            return Err(Error::Corrupt(format!(
                "expected {} blocks for a {rows}x{cols} matrix, found {}",
                geo.block_count(),
                masks.len()
            )));
        }
        for (b, &m) in masks.iter().enumerate() {
            if m & geo.padding_bits(b) != 0 {
                return Err(Error::Corrupt(format!("block {b}: padding lane marked nonzero")));
            }
        }
        let offsets = prefix_offsets(&masks)?;
        let total: usize = masks.iter().map(|m| m.count_ones() as usize).sum();
        if total != values.len() {
            return Err(Error::Corrupt(format!(
                "bitmasks account for {total} values but {} are stored",
                values.len()
            )));
        }
        Ok(SparseMatrix { rows, cols, layout, masks, values, offsets })
    }

    pub fn decode(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.rows, self.cols);
        let (rows, cols) = (self.rows, self.cols);
        match self.layout {
            BlockLayout::RowPair16 => {
                let col_blocks = cols.div_ceil(8);
                for (b, block) in self.blocks().enumerate() {
                    if block.bitmask == 0 {
                        continue;
                    }
                    let (rp, cb) = (b / col_blocks, b % col_blocks);
                    let lanes = expand(block.bitmask, block.values).expect("validated on construction");
                    for k in 0..8 {
                        let c = cb * 8 + k;
                        if c >= cols {
                            break;
                        }
                        m.set(2 * rp, c, lanes[2 * k]);
                        if 2 * rp + 1 < rows {
                            m.set(2 * rp + 1, c, lanes[2 * k + 1]);
                        }
                    }
                }
            }
            BlockLayout::Tile { rows: tr, cols: tc } => {
                let (tr, tc) = (tr as usize, tc as usize);
                let segs = tc / LANES;
                let tile_cols = cols.div_ceil(tc);
                for (b, block) in self.blocks().enumerate() {
                    if block.bitmask == 0 {
                        continue;
                    }
                    let tile = b / (tr * segs);
                    let within = b % (tr * segs);
                    let row = (tile / tile_cols) * tr + within / segs;
                    let c0 = (tile % tile_cols) * tc + (within % segs) * LANES;
                    let lanes = expand(block.bitmask, block.values).expect("validated on construction");
                    for (l, &v) in lanes.iter().enumerate() {
                        if c0 + l < cols {
                            m.set(row, c0 + l, v);
                        }
                    }
                }
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn layout(&self) -> BlockLayout {
        self.layout
    }

    #[inline]
    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn geometry(&self) -> Geometry {
        Geometry { rows: self.rows, cols: self.cols, layout: self.layout }
    }

    #[inline]
    pub fn block_count(&self) -> usize {
        self.masks.len()
    }

    /// Number of stored (nonzero) values.
    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn masks(&self) -> &[u16] {
        &self.masks
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    pub fn block(&self, i: usize) -> BlockRef<'_, T> {
        let start = self.offsets[i] as usize;
        let n = self.masks[i].count_ones() as usize;
        BlockRef { bitmask: self.masks[i], values: &self.values[start..start + n] }
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockRef<'_, T>> + '_ {
        let mut start = 0usize;
        self.masks.iter().map(move |&bitmask| {
            let n = bitmask.count_ones() as usize;
            let values = &self.values[start..start + n];
            start += n;
            BlockRef { bitmask, values }
        })
    }

    /// Fraction of the `rows × cols` entries that are not stored.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.nnz() as f64 / (self.rows * self.cols) as f64
    }

    pub fn footprint(&self) -> FootprintReport {
        let size = T::DTYPE.size();
        let dense_bytes = self.rows * self.cols * size;
        let compressed_bytes = self.nnz() * size + self.block_count() * MASK_BYTES;
        FootprintReport {
            dense_bytes,
            compressed_bytes,
            ratio: compressed_bytes as f64 / dense_bytes as f64,
        }
    }

    /// Serializes into the `SPKT` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let size = T::DTYPE.size();
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.block_count() * MASK_BYTES + self.nnz() * size);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.layout.tag());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        let (tr, tc) = match self.layout {
            BlockLayout::RowPair16 => (0u16, 0u16),
            BlockLayout::Tile { rows, cols } => (rows, cols),
        };
        out.extend_from_slice(&tr.to_le_bytes());
        out.extend_from_slice(&tc.to_le_bytes());
        out.extend_from_slice(&(self.block_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.nnz() as u64).to_le_bytes());
        for block in self.blocks() {
            out.extend_from_slice(&block.bitmask.to_le_bytes());
            for &v in block.values {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses an `SPKT` container whose dtype must be `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = Header::parse(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Corrupt(format!(
                "container holds {} values, expected {}",
                header.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let size = T::DTYPE.size();
        let mut masks = Vec::with_capacity(header.block_count);
        let mut values = Vec::with_capacity(header.nnz.min(bytes.len()));
        let mut pos = HEADER_LEN;
        for b in 0..header.block_count {
            let mb = bytes
                .get(pos..pos + MASK_BYTES)
                .ok_or_else(|| Error::Corrupt(format!("truncated stream: block {b} mask missing")))?;
            let mask = u16::from_le_bytes([mb[0], mb[1]]);
            pos += MASK_BYTES;
            let n = mask.count_ones() as usize;
            let vb = bytes.get(pos..pos + n * size).ok_or_else(|| {
                Error::Corrupt(format!("truncated stream: block {b} needs {n} values"))
            })?;
            values.extend(vb.chunks_exact(size).map(T::read_le));
            masks.push(mask);
            pos += n * size;
        }
        if pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes after last block", bytes.len() - pos)));
        }
        if values.len() != header.nnz {
            return Err(Error::Corrupt(format!(
                "header declares {} values, blocks hold {}",
                header.nnz,
                values.len()
            )));
        }
        Self::from_raw(header.rows, header.cols, header.layout, masks, values)
    }
}

fn prefix_offsets(masks: &[u16]) -> Result<Vec<u32>> {
    let mut offsets = Vec::with_capacity(masks.len());
    let mut acc: u64 = 0;
    for m in masks {
        offsets.push(
            u32::try_from(acc)
                .map_err(|_| Error::invalid("matrix", "more than 2^32 stored values"))?,
        );
        acc += m.count_ones() as u64;
    }
    Ok(offsets)
}

/// Decoded container header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub layout: BlockLayout,
    pub dtype: Dtype,
    pub rows: usize,
    pub cols: usize,
    pub block_count: usize,
    pub nnz: usize,
}

impl Header {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt(format!("truncated header: {} bytes", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Corrupt("bad magic, not an SPKT container".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let version = u16_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported format version {version}")));
        }
        let (tr, tc) = (u16_at(16), u16_at(18));
        let layout = match bytes[6] {
            0 => {
                if tr != 0 || tc != 0 {
                    return Err(Error::Corrupt("row-pair layout with nonzero tile shape".into()));
                }
                BlockLayout::RowPair16
            }
            1 => BlockLayout::Tile { rows: tr, cols: tc },
            t => return Err(Error::Corrupt(format!("unknown layout tag {t}"))),
        };
        layout.validate().map_err(|e| Error::Corrupt(format!("{e}")))?;
        let dtype = Dtype::from_tag(bytes[7])?;
        let rows = u32_at(8) as usize;
        let cols = u32_at(12) as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Corrupt(format!("empty matrix {rows}x{cols}")));
        }
        let block_count = u32_at(20) as usize;
        let expected = Geometry { rows, cols, layout }.block_count();
        if block_count != expected {
            return Err(Error::Corrupt(format!(
                "header declares {block_count} blocks, geometry needs {expected}"
            )));
        }
        let nnz = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
        let nnz = usize::try_from(nnz).map_err(|_| Error::Corrupt("value count overflows".into()))?;
        if nnz > rows * cols {
            return Err(Error::Corrupt(format!("{nnz} values exceed {rows}x{cols} entries")));
        }
        Ok(Header { version, layout, dtype, rows, cols, block_count, nnz })
    }

    pub fn footprint(&self) -> FootprintReport {
        let size = self.dtype.size();
        let dense_bytes = self.rows * self.cols * size;
        let compressed_bytes = self.nnz * size + self.block_count * MASK_BYTES;
        FootprintReport {
            dense_bytes,
            compressed_bytes,
            ratio: compressed_bytes as f64 / dense_bytes as f64,
        }
    }
}

/// A decoded container of any dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnySparseMatrix {
    F32(SparseMatrix<f32>),
    I8(SparseMatrix<i8>),
    I16(SparseMatrix<i16>),
}

impl AnySparseMatrix {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match Header::parse(bytes)?.dtype {
            Dtype::F32 => SparseMatrix::from_bytes(bytes).map(AnySparseMatrix::F32),
            Dtype::I8 => SparseMatrix::from_bytes(bytes).map(AnySparseMatrix::I8),
            Dtype::I16 => SparseMatrix::from_bytes(bytes).map(AnySparseMatrix::I16),
        }
    }
}

/// Dense vs compressed byte counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FootprintReport {
    pub dense_bytes: usize,
    pub compressed_bytes: usize,
    /// `compressed_bytes / dense_bytes`.
    pub ratio: f64,
}

/// Expands a block into its 16 lanes.
#[inline]
pub(crate) fn expand_lanes<T: Copy, U: Copy + Default>(
    mask: u16,
    values: &[T],
    conv: impl Fn(T) -> U,
) -> [U; LANES] {
    let mut out = [U::default(); LANES];
    let mut m = mask;
    let mut i = 0usize;
    while m != 0 {
        let lane = m.leading_zeros() as usize;
        out[lane] = conv(values[i]);
        i += 1;
        m &= !lane_bit(lane);
    }
    out
}
