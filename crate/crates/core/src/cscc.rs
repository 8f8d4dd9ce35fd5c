//! Cross-step consistency: slice each step's contextual tokens out of the
//! whole-recipe encoding and add them, scaled by `λ`, to the step's
//! independent encoding.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::text::{BlockSource, Boundary, TokenBlock};

pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Per-step conditioning after fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConditioning {
    pub blocks: Vec<TokenBlock>,
    pub lambda: f64,
    /// Encoder backend that produced the independent and joint inputs.
    pub provenance: String,
}

impl FusedConditioning {
    /// Independent encodings passed through untouched.
    pub fn passthrough(independent: Vec<TokenBlock>, provenance: impl Into<String>) -> Self {
        Self {
            blocks: independent,
            lambda: 0.0,
            provenance: provenance.into(),
        }
    }

    pub fn step_tokens(&self) -> Vec<Tensor> {
        self.blocks.iter().map(|b| b.tokens.clone()).collect()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Cuts `joint[b : b + t]` for every boundary.
pub fn extract_contextual_tokens(joint: &TokenBlock, boundaries: &[Boundary]) -> Result<Vec<TokenBlock>> {
    let total = joint.len();
    boundaries
        .iter()
        .enumerate()
        .map(|(index, b)| {
            if b.start + b.len > total {
                return Err(Error::Slicing {
                    index,
                    start: b.start,
                    len: b.len,
                    total,
                });
            }
            Ok(TokenBlock {
                tokens: tensor::slice_rows(&joint.tokens, b.start, b.len)?,
                source: BlockSource::Step(index),
                boundary: Some(*b),
            })
        })
        .collect()
}

/// `C + λ · C_ctx` over the step's tokens.
pub fn fuse_step_tokens(independent: &TokenBlock, contextual: &TokenBlock, lambda: f64) -> Result<TokenBlock> {
    check_lambda(lambda)?;
    if independent.len() != contextual.len() {
        return Err(Error::Alignment {
            independent: independent.len(),
            contextual: contextual.len(),
        });
    }
    let (a, c) = (&independent.tokens, &contextual.tokens);
    if a.shape() != c.shape() {
        return Err(Error::dim("fuse_step_tokens", a.shape(), c.shape()));
    }
    let data = a.data().iter().zip(c.data()).map(|(x, y)| x + lambda * y).collect();
    Ok(TokenBlock {
        tokens: Tensor::new(a.shape().to_vec(), data)?,
        source: independent.source,
        boundary: contextual.boundary,
    })
}

/// Fuses every step against its slice of the joint encoding.
pub fn fuse_conditioning(
    independent: &[TokenBlock],
    joint: &TokenBlock,
    boundaries: &[Boundary],
    lambda: f64,
    provenance: impl Into<String>,
) -> Result<FusedConditioning> {
    if independent.len() != boundaries.len() {
        return Err(Error::InvalidLayout(format!(
            "{} step blocks but {} boundaries",
            independent.len(),
            boundaries.len()
        )));
    }
    let contextual = extract_contextual_tokens(joint, boundaries)?;
    let blocks = independent
        .iter()
        .zip(&contextual)
        .map(|(i, c)| fuse_step_tokens(i, c, lambda))
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedConditioning {
        blocks,
        lambda,
        provenance: provenance.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{encode_recipe_joint, encode_steps_independent, format_prompt, ContextMixingEncoder, RecipeSpec};

    fn block(rows: Vec<Vec<f64>>) -> TokenBlock {
        TokenBlock {
            tokens: Tensor::from_rows(&rows).unwrap(),
            source: BlockSource::Step(0),
            boundary: None,
        }
    }

    #[test]
    fn fuse_arithmetic() {
        let c = block(vec![vec![1.0, 2.0]]);
        let x = block(vec![vec![2.0, 2.0]]);
        assert_eq!(fuse_step_tokens(&c, &x, 0.5).unwrap().tokens.data(), &[2.0, 3.0]);
        assert!(fuse_step_tokens(&c, &x, 0.0).unwrap().tokens.bit_eq(&c.tokens));
        assert!(matches!(fuse_step_tokens(&c, &x, 1.5), Err(Error::Parameter(_))));
        let longer = block(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(
            fuse_step_tokens(&c, &longer, 0.2),
            Err(Error::Alignment {
                independent: 1,
                contextual: 2
            })
        ));
    }

    #[test]
    fn extraction_partitions_the_joint_block() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let joint = block(rows);
        let bounds = [Boundary { start: 0, len: 3 }, Boundary { start: 3, len: 5 }];
        let parts = extract_contextual_tokens(&joint, &bounds).unwrap();
        assert_eq!(parts[0].len(), 3);
        assert_eq!(parts[1].len(), 5);
        let back = tensor::concat_rows(&[&parts[0].tokens, &parts[1].tokens]).unwrap();
        assert!(back.bit_eq(&joint.tokens));
        let bad = [Boundary { start: 6, len: 3 }];
        assert!(matches!(
            extract_contextual_tokens(&joint, &bad),
            Err(Error::Slicing { index: 0, .. })
        ));
    }

    #[test]
    fn contextual_tokens_differ_with_mixing_encoder() {
        let r = format_prompt(&RecipeSpec::new("g", ["Slice the carrot", "Fry the carrot strips"]));
        let enc = ContextMixingEncoder::new(16, 9);
        let (joint, bounds) = encode_recipe_joint(&r, &enc).unwrap();
        let ind = encode_steps_independent(&r, &enc).unwrap();
        let ctx = extract_contextual_tokens(&joint, &bounds).unwrap();
        for (i, c) in ind.iter().zip(&ctx) {
            assert_eq!(i.tokens.shape(), c.tokens.shape());
            assert!(i.tokens.max_abs_diff(&c.tokens) > 1e-6);
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn block(vals: &[f64]) -> TokenBlock {
        TokenBlock {
            tokens: Tensor::matrix(2, 3, vals.to_vec()).unwrap(),
            source: BlockSource::Step(0),
            boundary: None,
        }
    }

    proptest! {
        #[test]
        fn fusion_is_linear_in_lambda(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            c in prop::collection::vec(-5.0f64..5.0, 6),
            l1 in 0.0f64..0.5,
            l2 in 0.0f64..0.5,
        ) {
            let (a, c) = (block(&a), block(&c));
            let f = |l| fuse_step_tokens(&a, &c, l).unwrap().tokens;
            let d1 = crate::tensor::sub(&f(l1), &a.tokens).unwrap();
            let d2 = crate::tensor::sub(&f(l2), &a.tokens).unwrap();
            let d12 = crate::tensor::sub(&f(l1 + l2), &a.tokens).unwrap();
            prop_assert!(d12.max_abs_diff(&crate::tensor::add(&d1, &d2).unwrap()) < 1e-12);
            prop_assert!(f(0.0).bit_eq(&a.tokens));
        }
    }
}
