//! Payload messages: vectors of {+1, -1} bits.

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    bits: Vec<i8>,
}

impl Message {
    /// Builds a message from +1/-1 values.
    pub fn from_bits(bits: Vec<i8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidParam("message must have at least one bit".into()));
        }
        if let Some(bad) = bits.iter().position(|&b| b != 1 && b != -1) {
            return Err(Error::InvalidParam(format!(
                "message bit {bad} is {}, expected +1 or -1",
                bits[bad]
            )));
        }
        Ok(Message { bits })
    }

    /// Uniform random message of `k` bits.
    pub fn random(k: usize, rng: &mut RngStream) -> Result<Self> {
        use rand::RngCore;
        if k == 0 {
            return Err(Error::InvalidParam("message must have at least one bit".into()));
        }
        let bits = (0..k).map(|_| if rng.next_u64() & 1 == 1 { 1 } else { -1 }).collect();
        Ok(Message { bits })
    }

    /// Parses a 0/1 string; '1' maps to +1 and '0' to -1.
    pub fn from_bit_string(s: &str) -> Result<Self> {
        let bits: Result<Vec<i8>> = s
            .chars()
            .map(|c| match c {
                '1' => Ok(1),
                '0' => Ok(-1),
                other => Err(Error::InvalidParam(format!("bad message character {other:?}"))),
            })
            .collect();
        Message::from_bits(bits?)
    }

    /// Renders as a 0/1 string, inverse of [`Message::from_bit_string`].
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    /// Message with every bit flipped.
    pub fn negated(&self) -> Message {
        Message { bits: self.bits.iter().map(|&b| -b).collect() }
    }
}

/// Fraction of agreeing bits.
pub fn bit_accuracy(truth: &Message, decoded: &Message) -> Result<f64> {
    if truth.len() != decoded.len() {
        return Err(Error::Shape(format!(
            "message lengths differ: {} vs {}",
            truth.len(),
            decoded.len()
        )));
    }
    let agree = truth.bits().iter().zip(decoded.bits()).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / truth.len() as f64)
}

/// True when every bit agrees.
pub fn exact_match(truth: &Message, decoded: &Message) -> Result<bool> {
    Ok(bit_accuracy(truth, decoded)? == 1.0)
}
