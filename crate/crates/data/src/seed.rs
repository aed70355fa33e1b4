//! Stateless seed derivation so every (seed, epoch, index) draw is
//! reproducible regardless of iteration or worker order.

/// splitmix64 finaliser.
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds the words into one well-mixed seed.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x9e3779b97f4a7c15, |acc, &w| finalize(acc ^ finalize(w.wrapping_add(0x9e3779b97f4a7c15))))
}
