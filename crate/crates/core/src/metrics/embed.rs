use super::MetricError;

/// Bucket count of the offline trigram embedding.
pub const LEXICAL_DIM: usize = 4096;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Offline embedding: character-trigram counts hashed into
/// [`LEXICAL_DIM`] buckets, L2-normalized. Texts shorter than three
/// characters map to the zero vector.
pub fn lexical_embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; LEXICAL_DIM];
    let chars: Vec<char> = text.chars().collect();
    let mut buf = String::new();
    for tri in chars.windows(3) {
        buf.clear();
        buf.extend(tri);
        v[(fnv1a(buf.as_bytes()) % LEXICAL_DIM as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Cosine of the angle between `u` and `v`; 0 when either is the zero vector.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, MetricError> {
    if u.len() != v.len() {
        return Err(MetricError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Similarity under the offline embedding. Equal texts always score 1,
/// including ones too short to have a trigram.
pub fn lexical_similarity(a: &str, b: &str) -> f64 {
    if a == b {
        return 1.0;
    }
    cosine_similarity(&lexical_embed(a), &lexical_embed(b)).expect("fixed dimension")
}
