//! Vector quantization against a learned codebook.

use super::{check_channels, for_each_vector, grids_from, mean_sq, CodeUsage, QuantizeResult, RegTerms};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Index of the codebook row (`[K, c]`, row-major) closest to `z` in squared
/// Euclidean distance. Ties resolve to the lowest index.
pub fn nearest_code<T: Real>(codebook: &[T], dim: usize, z: &[T]) -> Result<usize> {
    if dim == 0 || codebook.is_empty() {
        return Err(Error::Regularizer("empty codebook".into()));
    }
    let mut best = 0;
    let mut best_d = T::infinity();
    for (k, row) in codebook.chunks(dim).enumerate() {
        let d: T = row.iter().zip(z).map(|(&e, &v)| (v - e) * (v - e)).sum();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    Ok(best)
}

/// VQ on the tape. `codebook` is a `[K, c]` parameter.
///
/// `reg_loss = mean((sg(z) - e)²) + beta * mean((z - sg(e))²)`; the first
/// term trains the codebook, the second commits the encoder.
pub fn vq_quantize<T: Real>(tape: &mut Tape<T>, z: Var, codebook: Var, beta: f64) -> Result<QuantizeResult> {
    let cshape = tape.shape(codebook).to_vec();
    if cshape.len() != 2 || cshape[0] == 0 {
        return Err(Error::Regularizer(format!("codebook must be a non-empty [K, c] table, got {cshape:?}")));
    }
    let (k, dim) = (cshape[0], cshape[1]);
    let shape = tape.shape(z).to_vec();
    check_channels("vq_quantize", &shape, dim)?;

    let cb = tape.value(codebook).data();
    let mut flat = Vec::new();
    let mut err = None;
    for_each_vector(&shape, tape.value(z).data(), |_, _, v| match nearest_code(cb, dim, v) {
        Ok(i) => flat.push(i),
        Err(e) => err = Some(e),
    });
    if let Some(e) = err {
        return Err(e);
    }
    let out_shape: [usize; 5] = shape.as_slice().try_into().expect("rank checked");
    let selected = tape.gather_rows(codebook, flat.clone(), out_shape)?;
    let selected_value = tape.value(selected).clone();
    let quantized = tape.straight_through(z, selected_value)?;

    let z_sg = tape.detach(z);
    let e_sg = tape.detach(selected);
    let codebook_term = mean_sq(tape, z_sg, selected)?;
    let commit = mean_sq(tape, z, e_sg)?;
    let weighted = tape.scale(commit, T::of(beta))?;
    let reg = tape.add(codebook_term, weighted)?;
    let terms = RegTerms {
        codebook: tape.value(codebook_term).item().f64(),
        commitment: tape.value(commit).item().f64(),
        ..RegTerms::default()
    };

    let flat: Vec<u64> = flat.into_iter().map(|i| i as u64).collect();
    let mut usage = CodeUsage::new(k);
    flat.iter().for_each(|&i| usage.record(i));
    let indices = grids_from(&shape, k as u64, flat)?;
    Ok(QuantizeResult {
        quantized,
        indices,
        reg_loss: reg,
        terms,
        usage,
    })
}
