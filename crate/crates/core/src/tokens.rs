//! Channel-major token matrices (`C × n`) with their spatial origin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Spatial grid a token set was flattened from (row-major, `height × width`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn square(side: usize) -> Self {
        Self::new(side, side)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalised `(x, y)` centre of the cell at flat index `i`.
    pub fn cell_center(&self, i: usize) -> (f64, f64) {
        let (r, c) = (i / self.width, i % self.width);
        (
            (c as f64 + 0.5) / self.width as f64,
            (r as f64 + 0.5) / self.height as f64,
        )
    }

    pub(crate) fn ensure_eq(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch {
                expected: (self.height, self.width),
                actual: (other.height, other.width),
            });
        }
        Ok(())
    }
}

/// A token matrix recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tokens {
    pub var: Var,
    /// `None` for tokens with no spatial layout (learned sparse tokens).
    pub grid: Option<Grid>,
}

impl Tokens {
    pub fn new(var: Var, grid: Option<Grid>) -> Self {
        Self { var, grid }
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.shape(self.var)[0]
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.var)[1]
    }

    pub fn to_set(&self, tape: &Tape) -> TokenSet {
        TokenSet {
            tensor: tape.value(self.var).clone(),
            grid: self.grid,
        }
    }
}

/// An owned token matrix, e.g. cached template features.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub tensor: Tensor,
    pub grid: Option<Grid>,
}

impl TokenSet {
    pub fn new(tensor: Tensor, grid: Option<Grid>) -> Result<Self> {
        if tensor.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: tensor.shape().to_vec(),
                reason: "token sets are channels × tokens".into(),
            });
        }
        if let Some(g) = grid {
            if g.len() != tensor.cols() {
                return Err(Error::InvalidShape {
                    shape: tensor.shape().to_vec(),
                    reason: format!("grid {}×{} does not match token count", g.height, g.width),
                });
            }
        }
        Ok(Self { tensor, grid })
    }

    pub fn channels(&self) -> usize {
        self.tensor.rows()
    }

    pub fn len(&self) -> usize {
        self.tensor.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn record(&self, tape: &mut Tape) -> Result<Tokens> {
        Ok(Tokens::new(tape.constant(self.tensor.clone())?, self.grid))
    }
}
