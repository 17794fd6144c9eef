//! Serialization helpers and numeric formatting shared by JSON/CSV writers.

use num_complex::Complex64 as C64;
use serde::ser::{SerializeSeq, SerializeStruct};
use serde::{Serialize, Serializer};

use crate::qstate::{DensityMatrix, StateVector};

/// Significant digits used for every number printed to CSV or stdout.
pub const SIG_DIGITS: usize = 12;

/// `%.12g`-style formatting.
pub fn fmt_sig(x: f64) -> String {
    fmt_sig_n(x, SIG_DIGITS)
}

pub fn fmt_sig_n(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -5 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn serialize_state<S: Serializer>(s: &StateVector, ser: S) -> Result<S::Ok, S::Error> {
    s.serialize(ser)
}

pub fn serialize_opt_state<S: Serializer>(s: &Option<StateVector>, ser: S) -> Result<S::Ok, S::Error> {
    match s {
        Some(s) => s.serialize(ser),
        None => ser.serialize_none(),
    }
}

/// Nonzero entries as `{row: [[subsystem, level], ...], col: [...], re, im}`.
pub fn serialize_density<S: Serializer>(rho: &DensityMatrix, ser: S) -> Result<S::Ok, S::Error> {
    struct Entry(Vec<(String, String)>, Vec<(String, String)>, C64);
    impl Serialize for Entry {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            let mut st = s.serialize_struct("Entry", 4)?;
            st.serialize_field("row", &self.0)?;
            st.serialize_field("col", &self.1)?;
            st.serialize_field("re", &self.2.re)?;
            st.serialize_field("im", &self.2.im)?;
            st.end()
        }
    }
    let space = rho.space();
    let labels: Vec<_> = space.labels().collect();
    let m = rho.matrix();
    let mut entries = Vec::new();
    for (i, r) in labels.iter().enumerate() {
        for (j, c) in labels.iter().enumerate() {
            let v = m[(i, j)];
            if v != C64::new(0.0, 0.0) {
                entries.push(Entry(space.describe(r), space.describe(c), v));
            }
        }
    }
    let mut seq = ser.serialize_seq(Some(entries.len()))?;
    for e in &entries {
        seq.serialize_element(e)?;
    }
    seq.end()
}

pub fn serialize_complex_vec<S: Serializer>(v: &[C64], ser: S) -> Result<S::Ok, S::Error> {
    let mut seq = ser.serialize_seq(Some(v.len()))?;
    for c in v {
        seq.serialize_element(&[c.re, c.im])?;
    }
    seq.end()
}
