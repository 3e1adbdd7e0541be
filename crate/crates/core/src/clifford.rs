//! The 24-element single-qubit Clifford group in `S·P·Z` form.
//!
//! Every element is written as `G = Z ∘ P ∘ S` (S first in time) with
//! `S ∈ {I, X90, Y90}`, `P ∈ {I, Y180}`, `Z ∈ {I, Z90, Z180, Z270}`.
//! The canonical index is `8·s + 4·p + z`, so index 0 is the identity.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::channels::{rotation_matrix, PauliTransferMatrix};
use crate::error::{Error, Result};

pub const GROUP_SIZE: usize = 24;

const MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SGate {
    I,
    X90,
    Y90,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PGate {
    I,
    Y180,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ZGate {
    I,
    Z90,
    Z180,
    Z270,
}

/// Physical pulses of the experiment, in gate-set order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Primitive {
    X90,
    Y90,
    X180,
    Y180,
    I,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::X90,
        Primitive::Y90,
        Primitive::X180,
        Primitive::Y180,
        Primitive::I,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::X90 => "X90",
            Primitive::Y90 => "Y90",
            Primitive::X180 => "X180",
            Primitive::Y180 => "Y180",
            Primitive::I => "I",
        }
    }

    /// Rotation axis and angle; the identity pulse has angle 0.
    pub fn rotation(self) -> (Vector3<f64>, f64) {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            Primitive::X90 => (Vector3::x(), FRAC_PI_2),
            Primitive::Y90 => (Vector3::y(), FRAC_PI_2),
            Primitive::X180 => (Vector3::x(), PI),
            Primitive::Y180 => (Vector3::y(), PI),
            Primitive::I => (Vector3::x(), 0.0),
        }
    }

    pub fn ideal_ptm(self) -> PauliTransferMatrix {
        let (axis, angle) = self.rotation();
        PauliTransferMatrix::from_rotation(&rotation_matrix(&axis, angle))
    }
}

impl SGate {
    fn rotation(self) -> Matrix3<f64> {
        match self {
            SGate::I => Matrix3::identity(),
            SGate::X90 => rotation_matrix(&Vector3::x(), std::f64::consts::FRAC_PI_2),
            SGate::Y90 => rotation_matrix(&Vector3::y(), std::f64::consts::FRAC_PI_2),
        }
    }

    pub fn primitive(self) -> Option<Primitive> {
        match self {
            SGate::I => None,
            SGate::X90 => Some(Primitive::X90),
            SGate::Y90 => Some(Primitive::Y90),
        }
    }
}

impl PGate {
    fn rotation(self) -> Matrix3<f64> {
        match self {
            PGate::I => Matrix3::identity(),
            PGate::Y180 => rotation_matrix(&Vector3::y(), std::f64::consts::PI),
        }
    }

    pub fn primitive(self) -> Option<Primitive> {
        match self {
            PGate::I => None,
            PGate::Y180 => Some(Primitive::Y180),
        }
    }
}

impl ZGate {
    pub fn angle(self) -> f64 {
        std::f64::consts::FRAC_PI_2 * (self as usize) as f64
    }

    fn rotation(self) -> Matrix3<f64> {
        rotation_matrix(&Vector3::z(), self.angle())
    }
}

/// One group element with its decomposition and ideal PTM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CliffordElement {
    pub index: usize,
    pub s: SGate,
    pub p: PGate,
    pub z: ZGate,
    pub ptm: PauliTransferMatrix,
}

impl CliffordElement {
    /// Rotation block of the ideal PTM.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.ptm.unital()
    }

    /// Physical pulses in time order. The identity element still uses one
    /// identity pulse; Z is virtual and contributes nothing.
    pub fn pulses(&self) -> Vec<Primitive> {
        let pulses: Vec<Primitive> = self
            .s
            .primitive()
            .into_iter()
            .chain(self.p.primitive())
            .collect();
        if pulses.is_empty() {
            vec![Primitive::I]
        } else {
            pulses
        }
    }

    pub fn label(&self) -> String {
        format!("{:?}.{:?}.{:?}", self.s, self.p, self.z)
    }
}

struct Group {
    elements: Vec<CliffordElement>,
    table: [[usize; GROUP_SIZE]; GROUP_SIZE],
    inverse: [usize; GROUP_SIZE],
}

fn build_elements() -> Vec<CliffordElement> {
    let mut out = Vec::with_capacity(GROUP_SIZE);
    for s in [SGate::I, SGate::X90, SGate::Y90] {
        for p in [PGate::I, PGate::Y180] {
            for z in [ZGate::I, ZGate::Z90, ZGate::Z180, ZGate::Z270] {
                let r = z.rotation() * p.rotation() * s.rotation();
                out.push(CliffordElement {
                    index: out.len(),
                    s,
                    p,
                    z,
                    ptm: PauliTransferMatrix::from_rotation(&r),
                });
            }
        }
    }
    out
}

fn lookup(elements: &[CliffordElement], r: &Matrix3<f64>) -> Option<usize> {
    elements
        .iter()
        .position(|e| (e.rotation() - r).abs().max() <= MATCH_TOL)
}

fn group() -> &'static Group {
    static GROUP: OnceLock<Group> = OnceLock::new();
    GROUP.get_or_init(|| {
        let elements = build_elements();
        let mut table = [[0usize; GROUP_SIZE]; GROUP_SIZE];
        for a in 0..GROUP_SIZE {
            for b in 0..GROUP_SIZE {
                let r = elements[a].rotation() * elements[b].rotation();
                table[a][b] = lookup(&elements, &r)
                    .unwrap_or_else(|| panic!("Clifford table is not closed at ({a}, {b})"));
            }
        }
        let mut inverse = [0usize; GROUP_SIZE];
        for a in 0..GROUP_SIZE {
            inverse[a] = (0..GROUP_SIZE)
                .find(|&b| table[a][b] == 0)
                .expect("every element has an inverse");
        }
        Group {
            elements,
            table,
            inverse,
        }
    })
}

/// The 24 elements in canonical order.
pub fn clifford_group() -> &'static [CliffordElement] {
    &group().elements
}

pub fn element(index: usize) -> Result<&'static CliffordElement> {
    group()
        .elements
        .get(index)
        .ok_or(Error::InvalidCliffordIndex(index))
}

/// Index of `ptm(a)·ptm(b)` (b first in time).
pub fn cayley(a: usize, b: usize) -> Result<usize> {
    if a >= GROUP_SIZE {
        return Err(Error::InvalidCliffordIndex(a));
    }
    if b >= GROUP_SIZE {
        return Err(Error::InvalidCliffordIndex(b));
    }
    Ok(group().table[a][b])
}

/// The full 24×24 table, `table[a][b] = cayley(a, b)`.
pub fn cayley_table() -> &'static [[usize; GROUP_SIZE]; GROUP_SIZE] {
    &group().table
}

pub fn inverse(a: usize) -> Result<usize> {
    group()
        .inverse
        .get(a)
        .copied()
        .ok_or(Error::InvalidCliffordIndex(a))
}

/// Index of an arbitrary rotation if it is a Clifford.
pub fn find_rotation(r: &Matrix3<f64>) -> Result<usize> {
    lookup(clifford_group(), r).ok_or(Error::GroupTable(usize::MAX, usize::MAX))
}

/// Composite `G_m ∘ … ∘ G_1` of a sequence given in time order.
pub fn compose_sequence(seq: &[usize]) -> Result<usize> {
    let mut acc = 0usize;
    for &g in seq {
        acc = cayley(g, acc)?;
    }
    Ok(acc)
}

/// Recovery gate for a sequence: the exact group inverse and the sign it
/// leaves on `σz` (always `+1` under this convention).
pub fn recovery_gate(seq: &[usize]) -> Result<(usize, i8)> {
    Ok((inverse(compose_sequence(seq)?)?, 1))
}

/// Index of the element with decomposition `(s, p, z)`.
pub fn index_of(s: SGate, p: PGate, z: ZGate) -> usize {
    8 * (s as usize) + 4 * (p as usize) + z as usize
}

/// Index of the element equal to a primitive rotation.
pub fn primitive_index(p: Primitive) -> usize {
    find_rotation(&p.ideal_ptm().unital()).expect("primitives are Cliffords")
}
