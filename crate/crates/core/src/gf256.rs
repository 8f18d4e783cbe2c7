//! GF(2^8) arithmetic over the polynomial x^8 + x^4 + x^3 + x^2 + 1 (0x11D).
//!
//! Addition is XOR. Multiplication goes through a 64 KiB product table built
//! at compile time. Bulk operations on symbol payloads use AVX2 byte shuffles
//! over two 16-entry half-byte tables when the CPU has them, and otherwise
//! stream through one 256-byte row of the product table.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Sub};

/// Reduction polynomial, including the x^8 term.
pub const POLYNOMIAL: u16 = 0x11D;

const fn build_exp_log() -> ([u8; 512], [u8; 256]) {
    let mut exp = [0u8; 512];
    let mut log = [0u8; 256];
    let mut x: u16 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        log[x as usize] = i as u8;
        x <<= 1;
        if x & 0x100 != 0 {
            x ^= POLYNOMIAL;
        }
        i += 1;
    }
    // Doubled so exp[log a + log b] never needs a modulo.
    while i < 512 {
        exp[i] = exp[i - 255];
        i += 1;
    }
    (exp, log)
}

const EXP_LOG: ([u8; 512], [u8; 256]) = build_exp_log();
static EXP: [u8; 512] = EXP_LOG.0;
static LOG: [u8; 256] = EXP_LOG.1;

const fn build_mul_table() -> [[u8; 256]; 256] {
    let (exp, log) = build_exp_log();
    let mut table = [[0u8; 256]; 256];
    let mut a = 1;
    while a < 256 {
        let mut b = 1;
        while b < 256 {
            table[a][b] = exp[log[a] as usize + log[b] as usize];
            b += 1;
        }
        a += 1;
    }
    table
}

static MUL: [[u8; 256]; 256] = build_mul_table();

#[inline]
pub fn mul(a: u8, b: u8) -> u8 {
    MUL[a as usize][b as usize]
}

/// Multiplicative inverse; `None` for zero.
#[inline]
pub fn inv(a: u8) -> Option<u8> {
    if a == 0 {
        None
    } else {
        Some(EXP[255 - LOG[a as usize] as usize])
    }
}

/// `dst[i] ^= c * src[i]` for every byte.
pub fn mul_add_slice(dst: &mut [u8], src: &[u8], c: u8) {
    debug_assert_eq!(dst.len(), src.len());
    match c {
        0 => {}
        1 => xor_slice(dst, src),
        _ => {
            let done = simd::mul_add(dst, src, c);
            mul_add_scalar(&mut dst[done..], &src[done..], c);
        }
    }
}

/// `buf[i] = c * buf[i]` for every byte.
pub fn scale_slice(buf: &mut [u8], c: u8) {
    match c {
        0 => buf.fill(0),
        1 => {}
        _ => {
            let done = simd::scale(buf, c);
            scale_scalar(&mut buf[done..], c);
        }
    }
}

fn mul_add_scalar(dst: &mut [u8], src: &[u8], c: u8) {
    let row = &MUL[c as usize];
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= row[*s as usize];
    }
}

fn scale_scalar(buf: &mut [u8], c: u8) {
    let row = &MUL[c as usize];
    for b in buf.iter_mut() {
        *b = row[*b as usize];
    }
}

/// Products of `c` with every low half-byte and every high half-byte value.
/// Since multiplication distributes over XOR, `c * x = lo[x & 15] ^ hi[x >> 4]`.
fn nibble_tables(c: u8) -> ([u8; 16], [u8; 16]) {
    let mut lo = [0u8; 16];
    let mut hi = [0u8; 16];
    for i in 0..16u8 {
        lo[i as usize] = mul(c, i);
        hi[i as usize] = mul(c, i << 4);
    }
    (lo, hi)
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    /// Bytes handled from the front of the slices; the caller does the rest.
    pub fn mul_add(dst: &mut [u8], src: &[u8], c: u8) -> usize {
        if dst.len() >= 32 && is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just checked.
            unsafe { mul_add_avx2(dst, src, c) }
        } else {
            0
        }
    }

    pub fn scale(buf: &mut [u8], c: u8) -> usize {
        if buf.len() >= 32 && is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just checked.
            unsafe { scale_avx2(buf, c) }
        } else {
            0
        }
    }

    #[target_feature(enable = "avx2")]
    unsafe fn tables(c: u8) -> (__m256i, __m256i) {
        let (lo, hi) = super::nibble_tables(c);
        (
            _mm256_broadcastsi128_si256(_mm_loadu_si128(lo.as_ptr() as *const __m128i)),
            _mm256_broadcastsi128_si256(_mm_loadu_si128(hi.as_ptr() as *const __m128i)),
        )
    }

    #[target_feature(enable = "avx2")]
    unsafe fn product(lo: __m256i, hi: __m256i, x: __m256i) -> __m256i {
        let mask = _mm256_set1_epi8(0x0f);
        let l = _mm256_shuffle_epi8(lo, _mm256_and_si256(x, mask));
        let h = _mm256_shuffle_epi8(hi, _mm256_and_si256(_mm256_srli_epi64(x, 4), mask));
        _mm256_xor_si256(l, h)
    }

    #[target_feature(enable = "avx2")]
    unsafe fn mul_add_avx2(dst: &mut [u8], src: &[u8], c: u8) -> usize {
        let n = dst.len().min(src.len()) / 32 * 32;
        let (lo, hi) = tables(c);
        let (d, s) = (dst.as_mut_ptr(), src.as_ptr());
        let mut i = 0;
        while i < n {
            let x = _mm256_loadu_si256(s.add(i) as *const __m256i);
            let acc = _mm256_loadu_si256(d.add(i) as *const __m256i);
            _mm256_storeu_si256(d.add(i) as *mut __m256i, _mm256_xor_si256(acc, product(lo, hi, x)));
            i += 32;
        }
        n
    }

    #[target_feature(enable = "avx2")]
    unsafe fn scale_avx2(buf: &mut [u8], c: u8) -> usize {
        let n = buf.len() / 32 * 32;
        let (lo, hi) = tables(c);
        let b = buf.as_mut_ptr();
        let mut i = 0;
        while i < n {
            let x = _mm256_loadu_si256(b.add(i) as *const __m256i);
            _mm256_storeu_si256(b.add(i) as *mut __m256i, product(lo, hi, x));
            i += 32;
        }
        n
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod simd {
    pub fn mul_add(_dst: &mut [u8], _src: &[u8], _c: u8) -> usize {
        0
    }

    pub fn scale(_buf: &mut [u8], _c: u8) -> usize {
        0
    }
}

fn xor_slice(dst: &mut [u8], src: &[u8]) {
    let mut d = dst.chunks_exact_mut(8);
    let mut s = src.chunks_exact(8);
    for (dc, sc) in (&mut d).zip(&mut s) {
        let x = u64::from_ne_bytes(dc.try_into().unwrap()) ^ u64::from_ne_bytes(sc.try_into().unwrap());
        dc.copy_from_slice(&x.to_ne_bytes());
    }
    for (db, sb) in d.into_remainder().iter_mut().zip(s.remainder()) {
        *db ^= sb;
    }
}

/// A field element, for code that prefers operators over free functions.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Gf256(pub u8);

impl Gf256 {
    pub const ZERO: Gf256 = Gf256(0);
    pub const ONE: Gf256 = Gf256(1);

    pub fn inv(self) -> Option<Gf256> {
        inv(self.0).map(Gf256)
    }
}

impl fmt::Debug for Gf256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Gf256({:#04x})", self.0)
    }
}

impl From<u8> for Gf256 {
    fn from(v: u8) -> Self {
        Gf256(v)
    }
}

impl Add for Gf256 {
    type Output = Gf256;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn add(self, rhs: Gf256) -> Gf256 {
        Gf256(self.0 ^ rhs.0)
    }
}

impl AddAssign for Gf256 {
    fn add_assign(&mut self, rhs: Gf256) {
        *self = *self + rhs;
    }
}

impl Sub for Gf256 {
    type Output = Gf256;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn sub(self, rhs: Gf256) -> Gf256 {
        Gf256(self.0 ^ rhs.0)
    }
}

impl Mul for Gf256 {
    type Output = Gf256;
    fn mul(self, rhs: Gf256) -> Gf256 {
        Gf256(mul(self.0, rhs.0))
    }
}

impl MulAssign for Gf256 {
    fn mul_assign(&mut self, rhs: Gf256) {
        *self = *self * rhs;
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Div for Gf256 {
    type Output = Gf256;
    /// Panics on division by zero, like integer division.
    fn div(self, rhs: Gf256) -> Gf256 {
        let r = rhs.inv().expect("division by zero in GF(256)");
        self * r
    }
}
