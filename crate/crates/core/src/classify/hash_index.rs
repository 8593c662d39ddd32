use std::collections::HashMap;

use crate::features::PerceptualHash;

const BANDS: usize = 4;
const BAND_BITS: u32 = 16;

/// Exact range search over 64-bit hashes with a 4-band multi-index hash.
///
/// If two hashes differ in at most `r` bits, one of the four 16-bit bands
/// differs in at most `r / 4` bits. Probing each band's table within that
/// radius therefore finds every true neighbour. When the probe would touch
/// more buckets than there are hashes, a linear scan is used instead.
#[derive(Clone, Debug, Default)]
pub struct HashIndex {
    codes: Vec<u64>,
    tables: Vec<HashMap<u16, Vec<u32>>>,
}

#[inline]
fn band(code: u64, k: usize) -> u16 {
    (code >> (k as u32 * BAND_BITS)) as u16
}

fn binomial_ball(bits: u32, radius: u32) -> u64 {
    let mut total = 0u64;
    let mut c = 1u64;
    for k in 0..=radius.min(bits) {
        total += c;
        c = c * (bits - k) as u64 / (k + 1) as u64;
    }
    total
}

/// Calls `f` for every 16-bit value within `radius` bits of `center`.
fn for_each_in_ball(center: u16, radius: u32, f: &mut impl FnMut(u16)) {
    fn rec(v: u16, start: u32, left: u32, f: &mut impl FnMut(u16)) {
        f(v);
        if left == 0 {
            return;
        }
        for b in start..BAND_BITS {
            rec(v ^ (1 << b), b + 1, left - 1, f);
        }
    }
    rec(center, 0, radius, f);
}

impl HashIndex {
    pub fn new(hashes: &[PerceptualHash]) -> Self {
        let codes: Vec<u64> = hashes.iter().map(|h| h.0).collect();
        let mut tables = vec![HashMap::new(); BANDS];
        for (i, &c) in codes.iter().enumerate() {
            for (k, t) in tables.iter_mut().enumerate() {
                t.entry(band(c, k)).or_insert_with(Vec::new).push(i as u32);
            }
        }
        Self { codes, tables }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, i: usize) -> PerceptualHash {
        PerceptualHash(self.codes[i])
    }

    /// All indexed hashes within Hamming distance `radius` of `q`, as
    /// `(index, distance)` in ascending index order.
    pub fn range(&self, q: PerceptualHash, radius: u32) -> Vec<(usize, u32)> {
        let sub = radius / BANDS as u32;
        let probes = BANDS as u64 * binomial_ball(BAND_BITS, sub);
        if radius >= 64 || probes >= self.codes.len() as u64 {
            return self.scan(q, radius);
        }
        let mut hits = Vec::new();
        let mut seen = vec![false; self.codes.len()];
        for (k, table) in self.tables.iter().enumerate() {
            for_each_in_ball(band(q.0, k), sub, &mut |key| {
                if let Some(bucket) = table.get(&key) {
                    for &i in bucket {
                        let i = i as usize;
                        if !seen[i] {
                            seen[i] = true;
                            let d = (self.codes[i] ^ q.0).count_ones();
                            if d <= radius {
                                hits.push((i, d));
                            }
                        }
                    }
                }
            });
        }
        hits.sort_unstable();
        hits
    }

    fn scan(&self, q: PerceptualHash, radius: u32) -> Vec<(usize, u32)> {
        self.codes
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| {
                let d = (c ^ q.0).count_ones();
                (d <= radius).then_some((i, d))
            })
            .collect()
    }
}
