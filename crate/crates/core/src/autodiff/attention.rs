use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Scaled dot-product attention split over `heads` column blocks:
/// per head `softmax(Q_h K_h^T / sqrt(C / heads)) V_h`, heads concatenated
/// back to `a x C`. Any output projection is applied by the caller.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (_, c) = tape.shape(q);
    let (nk, ck) = tape.shape(k);
    let (nv, cv) = tape.shape(v);
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!(
            "attention: width {c} not divisible by {heads} heads"
        )));
    }
    if ck != c || cv != c || nk != nv {
        return Err(Error::invalid(format!(
            "attention: incompatible shapes q(*x{c}) k({nk}x{ck}) v({nv}x{cv})"
        )));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let weights = tape.softmax_rows(logits)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn single_key_returns_value_row() {
        let mut t = Tape::new();
        let q =
            t.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.3).collect()).unwrap());
        let k = t.constant(Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.1]).unwrap());
        let v = t.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let o = multi_head_attention(&mut t, q, k, v, 2).unwrap();
        for r in 0..3 {
            assert_eq!(t.value(o).row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn hand_two_by_two() {
        // q = [[1,0],[0,1]], k = [[1,0],[0,1]], v = [[1,2],[3,4]], one head:
        // row 0 logits (1, 0)/sqrt(2) -> weights (w, 1-w) with
        // w = 1 / (1 + exp(-1/sqrt 2)).
        let mut t = Tape::new();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = t.constant(eye.clone());
        let k = t.constant(eye);
        let v = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let o = multi_head_attention(&mut t, q, k, v, 1).unwrap();
        let w = 1.0 / (1.0 + (-1.0 / 2f64.sqrt()).exp());
        let expect = [
            w * 1.0 + (1.0 - w) * 3.0,
            w * 2.0 + (1.0 - w) * 4.0,
            (1.0 - w) * 1.0 + w * 3.0,
            (1.0 - w) * 2.0 + w * 4.0,
        ];
        for (a, b) in t.value(o).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(
            multi_head_attention(&mut t, x, x, x, 4),
            Err(Error::InvalidArgument(_))
        ));
    }
}
