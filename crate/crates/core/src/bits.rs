//! Bit-packed ±1 tensors and exact XNOR/popcount arithmetic.
//!
//! A `+1` element is stored as a set bit, `-1` as a clear bit. For ±1
//! vectors the real dot product is recovered exactly from a popcount:
//! `dot(a, b) = 2 * popcount(XNOR(a, b)) - n`. The binary convolution
//! packs activation patches and filters with the same element order and
//! reduces each output position to one such popcount, scaled per output
//! channel.

use crate::error::{Error, Result};
use crate::ops::conv_out;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const WORD_BITS: usize = 64;

/// Bit-packed ±1 tensor. Bits are laid out contiguously in row-major
/// (innermost axis fastest) order; the final word is zero-padded and the
/// padding never contributes to popcounts.
#[derive(Clone, Debug, PartialEq)]
pub struct BitTensor {
    logical_shape: Vec<usize>,
    words: Vec<u64>,
    /// Innermost axis along which bits are contiguous.
    pack_axis: usize,
}

impl BitTensor {
    /// Build from raw words, forcing padding bits in the final word to zero.
    pub fn from_words(logical_shape: Vec<usize>, mut words: Vec<u64>) -> Result<Self> {
        let n: usize = logical_shape.iter().product();
        let expect = n.div_ceil(WORD_BITS);
        if words.len() != expect || n == 0 {
            return Err(Error::InvalidShape(format!(
                "{} words for {} logical bits",
                words.len(),
                n
            )));
        }
        let tail = n % WORD_BITS;
        if tail != 0 {
            *words.last_mut().unwrap() &= (1u64 << tail) - 1;
        }
        let pack_axis = logical_shape.len() - 1;
        Ok(Self { logical_shape, words, pack_axis })
    }

    pub fn logical_shape(&self) -> &[usize] {
        &self.logical_shape
    }

    pub fn len(&self) -> usize {
        self.logical_shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn pack_axis(&self) -> usize {
        self.pack_axis
    }

    pub fn get(&self, i: usize) -> bool {
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }
}

/// Pack the elementwise sign of `t`: bit 1 for `v >= 0`, bit 0 for `v < 0`.
/// Zero maps to +1.
pub fn sign_pack<T: Scalar>(t: &Tensor<T>) -> Result<BitTensor> {
    if t.numel() == 0 {
        return Err(Error::InvalidShape("sign_pack of empty tensor".into()));
    }
    let n = t.numel();
    let mut words = vec![0u64; n.div_ceil(WORD_BITS)];
    for (i, &v) in t.data().iter().enumerate() {
        if v >= T::zero() {
            words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
        }
    }
    let pack_axis = t.shape().len() - 1;
    Ok(BitTensor { logical_shape: t.shape().to_vec(), words, pack_axis })
}

/// Expand back to a dense ±1 tensor.
pub fn unpack<T: Scalar>(b: &BitTensor) -> Tensor<T> {
    let n = b.len();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(if b.get(i) { T::one() } else { -T::one() });
    }
    Tensor::from_vec(b.logical_shape.to_vec(), data)
}

/// Dot product of the two ±1 vectors: `2 * popcount(XNOR) - n`, exact.
pub fn xnor_dot(a: &BitTensor, b: &BitTensor) -> Result<i32> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "xnor_dot lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    // Padding bits are zero on both sides, so XNOR sets them; subtract them
    // from the raw count instead of masking every word.
    let pad = a.words.len() * WORD_BITS - n;
    let mut pop: u32 = 0;
    for (&x, &y) in a.words.iter().zip(&b.words) {
        pop += (!(x ^ y)).count_ones();
    }
    Ok(2 * (pop as i32 - pad as i32) - n as i32)
}

/// Per-output-channel scaling factor; one nonnegative real per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> ScaleVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| *v < T::zero() || !v.is_finite()) {
            return Err(Error::InvalidShape("scale entries must be finite and >= 0".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean absolute value of each output channel of a (Co, C, k, k) kernel:
/// the channel L1 norm divided by fan-in.
pub fn compute_alpha<T: Scalar>(w: &Tensor<T>) -> Result<ScaleVector<T>> {
    let (co, c, kh, kw) = w.dims4()?;
    let fan_in = c * kh * kw;
    let inv = T::one() / T::from_usize(fan_in).unwrap();
    let mut values = Vec::with_capacity(co);
    for o in 0..co {
        let row = &w.data()[o * fan_in..(o + 1) * fan_in];
        let l1 = row.iter().fold(T::zero(), |acc, &v| acc + v.abs());
        values.push(l1 * inv);
    }
    Ok(ScaleVector { values })
}

/// Row-aligned bit matrix: each row starts on a word boundary so rows can
/// be XNOR-reduced independently. Rows share one element order, so patch
/// row `p` against filter row `f` is aligned by construction.
pub(crate) struct BitRows {
    pub rows: usize,
    pub bits_per_row: usize,
    pub words_per_row: usize,
    pub words: Vec<u64>,
}

impl BitRows {
    fn new(rows: usize, bits_per_row: usize) -> Self {
        let words_per_row = bits_per_row.div_ceil(WORD_BITS).max(1);
        Self { rows, bits_per_row, words_per_row, words: vec![0u64; rows * words_per_row] }
    }

    #[inline]
    fn set(&mut self, row: usize, bit: usize) {
        self.words[row * self.words_per_row + bit / WORD_BITS] |= 1u64 << (bit % WORD_BITS);
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }
}

/// Pack every (kh, kw) patch of the signed activation as one bit row in
/// (c, kh, kw) element order. Out-of-bounds taps binarize to +1 (set bit):
/// zero padding passes through sign(0) = +1.
pub(crate) fn pack_patches<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> (BitRows, usize, usize) {
    let (n, c, h, w) = x.dims4().expect("activation must be (N,C,H,W)");
    let ho = conv_out(h, k, stride, padding);
    let wo = conv_out(w, k, stride, padding);
    let mut rows = BitRows::new(n * ho * wo, c * k * k);
    let xd = x.data();
    let mut r = 0;
    for im in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut bit = 0;
                for ci in 0..c {
                    let plane = ((im * c) + ci) * h * w;
                    for kh in 0..k {
                        let ih = (oh * stride + kh) as isize - padding as isize;
                        for kw in 0..k {
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            let inside =
                                ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w;
                            let plus = if inside {
                                xd[plane + ih as usize * w + iw as usize] >= T::zero()
                            } else {
                                true
                            };
                            if plus {
                                rows.set(r, bit);
                            }
                            bit += 1;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    (rows, ho, wo)
}

/// Pack each (C, k, k) filter of a (Co, C, k, k) kernel as one bit row.
pub(crate) fn pack_filters<T: Scalar>(w: &Tensor<T>) -> BitRows {
    let (co, c, kh, kw) = w.dims4().expect("kernel must be (Co,C,k,k)");
    let fan_in = c * kh * kw;
    let mut rows = BitRows::new(co, fan_in);
    let wd = w.data();
    for o in 0..co {
        for (bit, &v) in wd[o * fan_in..(o + 1) * fan_in].iter().enumerate() {
            if v >= T::zero() {
                rows.set(o, bit);
            }
        }
    }
    rows
}

/// XNOR-popcount dot of every patch row against every filter row.
/// Output is position-major: `out[p * co + f]`, 32-bit accumulation.
pub(crate) fn xnor_conv_core(patches: &BitRows, filters: &BitRows) -> Vec<i32> {
    assert_eq!(patches.bits_per_row, filters.bits_per_row);
    let n = patches.bits_per_row;
    let pad = patches.words_per_row * WORD_BITS - n;
    let mut out = Vec::with_capacity(patches.rows * filters.rows);
    for p in 0..patches.rows {
        let pr = patches.row(p);
        for f in 0..filters.rows {
            let fr = filters.row(f);
            let mut pop: u32 = 0;
            for (&a, &b) in pr.iter().zip(fr) {
                pop += (!(a ^ b)).count_ones();
            }
            out.push(2 * (pop as i32 - pad as i32) - n as i32);
        }
    }
    out
}

/// XNOR convolution of already-signed operands, unscaled integer counts as
/// `T`. Shared by [`binary_conv2d`] and the training-graph forward.
pub(crate) fn xnor_conv_unscaled<T: Scalar>(
    act: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, _, _) = act.dims4()?;
    let (co, cw, kh, kw) = w.dims4()?;
    if cw != c {
        return Err(Error::ShapeMismatch(format!(
            "activation has {c} channels, kernel expects {cw}"
        )));
    }
    if kh != kw {
        return Err(Error::InvalidShape(format!("kernel must be square, got {kh}x{kw}")));
    }
    let (patches, ho, wo) = pack_patches(act, kh, stride, padding);
    let filters = pack_filters(w);
    let dots = xnor_conv_core(&patches, &filters);

    let mut out = vec![T::zero(); n * co * ho * wo];
    let mut p = 0;
    for im in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let base = p * co;
                for f in 0..co {
                    out[((im * co + f) * ho + oh) * wo + ow] = T::from_i32(dots[base + f]).unwrap();
                }
                p += 1;
            }
        }
    }
    Ok(Tensor::from_vec(vec![n, co, ho, wo], out))
}

/// Binary convolution: binarize activation and kernel, XNOR-convolve with
/// exact integer accumulation, then scale each output channel.
///
/// Matches the dense reference `scale[co] * conv(sign(act), sign(w))` where
/// padding positions binarize to +1.
pub fn binary_conv2d<T: Scalar>(
    act: &Tensor<T>,
    w: &Tensor<T>,
    scale: &ScaleVector<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let co = w.shape()[0];
    if scale.len() != co {
        return Err(Error::ShapeMismatch(format!(
            "scale length {} vs {} output channels",
            scale.len(),
            co
        )));
    }
    let mut out = xnor_conv_unscaled(act, w, stride, padding)?;
    let (n, _, ho, wo) = out.dims4()?;
    let sv = scale.values();
    for im in 0..n {
        for f in 0..co {
            let base = (im * co + f) * ho * wo;
            for q in 0..ho * wo {
                out.data_mut()[base + q] *= sv[f];
            }
        }
    }
    Ok(out)
}
