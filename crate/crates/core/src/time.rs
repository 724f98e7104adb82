//! Integer-nanosecond simulation time.

/// Nanoseconds on the master (Syncboard) clock, which is the simulation's true time.
pub type Nanos = i64;

pub const NANOS_PER_SEC: i64 = 1_000_000_000;

pub fn secs_to_nanos(s: f64) -> Nanos {
    (s * 1e9).round() as Nanos
}

pub fn nanos_to_secs(ns: Nanos) -> f64 {
    ns as f64 / 1e9
}

/// Integer division rounding to the nearest integer, ties to even.
pub fn div_round_half_even(num: i128, den: i128) -> i128 {
    assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => {
            if q % 2 == 0 {
                q
            } else {
                q + 1
            }
        }
    }
}
