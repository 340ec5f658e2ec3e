//! Input sampling and mutation under a constraint set. Sampling is a pure
//! function of `(seed, trial index)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::interp::{Buffer, ExecutionInput};
use crate::ir::{DType, Program};

use super::constraints::ConstraintSet;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("empty interval for symbol `{0}` after binding: {1}")]
    EmptyInterval(String, String),
    #[error("cannot resolve bounds for symbols {0:?}")]
    UnresolvableBounds(Vec<String>),
    #[error("shape of `{0}` not evaluable under the sampled symbols")]
    Shape(String),
}

/// Draw one symbol value uniformly from its (evaluated) interval.
fn draw_symbol(
    name: &str,
    lo: i64,
    hi: i64,
    multiple_of: Option<i64>,
    rng: &mut ChaCha8Rng,
) -> Result<i64, SampleError> {
    if hi <= lo {
        return Err(SampleError::EmptyInterval(
            name.to_string(),
            format!("[{lo}, {hi})"),
        ));
    }
    match multiple_of {
        None => Ok(rng.gen_range(lo..hi)),
        Some(m) => {
            let m = m.max(1);
            let k_lo = lo.div_euclid(m) + i64::from(lo.rem_euclid(m) != 0);
            let k_hi = (hi - 1).div_euclid(m);
            if k_hi < k_lo {
                return Err(SampleError::EmptyInterval(
                    name.to_string(),
                    format!("no multiple of {m} in [{lo}, {hi})"),
                ));
            }
            Ok(rng.gen_range(k_lo..=k_hi) * m)
        }
    }
}

/// Sample all symbols: size symbols first, then anything whose bounds become
/// evaluable as the binding grows.
fn sample_symbols(
    constraints: &ConstraintSet,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, i64>, SampleError> {
    let mut binding: BTreeMap<String, i64> = BTreeMap::new();
    let mut pending: Vec<&String> = constraints.symbols.keys().collect();
    // Size symbols have constant bounds and everything else may depend on
    // them; sorting by provenance first keeps the draw order stable.
    pending.sort_by_key(|name| {
        let c = &constraints.symbols[*name];
        (
            c.provenance != super::Provenance::SizeSymbol,
            (*name).clone(),
        )
    });
    while !pending.is_empty() {
        let mut progressed = false;
        let mut still_pending = Vec::new();
        for name in pending {
            let c = &constraints.symbols[name];
            let lo = c.lo.eval(&binding);
            let hi = c.hi.eval(&binding);
            match (lo, hi) {
                (Ok(lo), Ok(hi)) => {
                    let v = draw_symbol(name, lo, hi, c.multiple_of, rng)?;
                    binding.insert(name.clone(), v);
                    progressed = true;
                }
                _ => still_pending.push(name),
            }
        }
        if !progressed {
            return Err(SampleError::UnresolvableBounds(
                still_pending.into_iter().cloned().collect(),
            ));
        }
        pending = still_pending;
    }
    Ok(binding)
}

fn fill_buffer(
    dtype: DType,
    len: usize,
    constraints: &ConstraintSet,
    rng: &mut ChaCha8Rng,
) -> Buffer {
    let (flo, fhi) = constraints.float_range;
    let (ilo, ihi) = constraints.int_range;
    let mut buffer = match dtype {
        DType::F64 => Buffer::F64((0..len).map(|_| rng.gen_range(flo..=fhi)).collect()),
        DType::F32 => {
            Buffer::F32((0..len).map(|_| rng.gen_range(flo as f32..=fhi as f32)).collect())
        }
        DType::I64 => Buffer::I64((0..len).map(|_| rng.gen_range(ilo..=ihi)).collect()),
        DType::I32 => Buffer::I32(
            (0..len)
                .map(|_| rng.gen_range(ilo.max(i32::MIN as i64)..=ihi.min(i32::MAX as i64)) as i32)
                .collect(),
        ),
        DType::Bool => Buffer::Bool((0..len).map(|_| rng.gen_bool(0.5)).collect()),
    };
    // Rare special values exercise zeros and range extremes.
    if len > 0 && dtype.is_float() && rng.gen_bool(0.01) {
        let idx = rng.gen_range(0..len);
        let mut specials = vec![0.0f64.clamp(flo, fhi), flo, fhi];
        if constraints.allow_nan_inf {
            specials.extend([f64::NAN, f64::INFINITY, f64::NEG_INFINITY]);
        }
        let value = specials[rng.gen_range(0..specials.len())];
        match &mut buffer {
            Buffer::F64(v) => v[idx] = value,
            Buffer::F32(v) => v[idx] = value as f32,
            _ => {}
        }
    }
    buffer
}

/// Sample a complete input for `program`: symbols first, then uniformly
/// random data for the containers listed in `sampled`; every other
/// non-transient container is zero-filled. Deterministic in
/// `(seed, trial index)`.
pub fn sample(
    constraints: &ConstraintSet,
    program: &Program,
    sampled: &[String],
    seed: u64,
    trial: u32,
) -> Result<ExecutionInput, SampleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    let symbols = sample_symbols(constraints, &mut rng)?;
    let mut input = ExecutionInput {
        symbols,
        buffers: BTreeMap::new(),
    };
    for (name, desc) in &program.containers {
        if desc.transient {
            continue;
        }
        let mut len = 1usize;
        for e in &desc.shape {
            let extent = e
                .eval(&input.symbols)
                .map_err(|_| SampleError::Shape(name.clone()))?;
            len = len.saturating_mul(extent.max(0) as usize);
        }
        let buffer = if sampled.iter().any(|s| s == name) {
            fill_buffer(desc.dtype, len, constraints, &mut rng)
        } else {
            Buffer::zeros(desc.dtype, len)
        };
        input.buffers.insert(name.clone(), buffer);
    }
    Ok(input)
}

fn clamp_f64(v: f64, lo: f64, hi: f64) -> f64 {
    if v.is_nan() {
        return v;
    }
    v.clamp(lo, hi)
}

/// Mutate a corpus entry within the constraints: nudge one symbol or corrupt
/// a few buffer elements, then clamp everything back into range.
pub fn mutate(
    base: &ExecutionInput,
    constraints: &ConstraintSet,
    program: &Program,
    sampled: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<ExecutionInput, SampleError> {
    let mut input = base.clone();
    let mutate_symbol = !input.symbols.is_empty() && rng.gen_bool(0.3);
    if mutate_symbol {
        let names: Vec<String> = input.symbols.keys().cloned().collect();
        let name = names[rng.gen_range(0..names.len())].clone();
        if let Some(c) = constraints.symbols.get(&name) {
            // Bounds may depend on other symbols; evaluate under the current
            // binding minus the mutated one.
            let mut env = input.symbols.clone();
            env.remove(&name);
            if let (Ok(lo), Ok(hi)) = (c.lo.eval(&env), c.hi.eval(&env)) {
                if hi > lo {
                    let old = input.symbols[&name];
                    let step = c.multiple_of.unwrap_or(1).max(1);
                    let delta = [step, -step, 2 * step, -(2 * step)][rng.gen_range(0..4)];
                    let mut v = old.saturating_add(delta).clamp(lo, hi - 1);
                    if let Some(m) = c.multiple_of {
                        let m = m.max(1);
                        v = (v.div_euclid(m)) * m;
                        if v < lo {
                            v += m;
                        }
                        if v > hi - 1 {
                            v -= m;
                        }
                    }
                    if v >= lo && v < hi {
                        input.symbols.insert(name.clone(), v);
                    }
                }
            }
        }
        // Dependent buffer sizes may have changed; re-cut every buffer.
        for (name, desc) in &program.containers {
            if desc.transient {
                continue;
            }
            let mut len = 1usize;
            for e in &desc.shape {
                let extent = e
                    .eval(&input.symbols)
                    .map_err(|_| SampleError::Shape(name.clone()))?;
                len = len.saturating_mul(extent.max(0) as usize);
            }
            let stale = input.buffers.get(name).map(|b| b.len() != len).unwrap_or(true);
            if stale {
                let buffer = if sampled.iter().any(|s| s == name) {
                    fill_buffer(desc.dtype, len, constraints, rng)
                } else {
                    Buffer::zeros(desc.dtype, len)
                };
                input.buffers.insert(name.clone(), buffer);
            }
        }
    } else {
        let candidates: Vec<&String> = sampled
            .iter()
            .filter(|n| input.buffers.get(*n).map(|b| !b.is_empty()).unwrap_or(false))
            .collect();
        if !candidates.is_empty() {
            let name = candidates[rng.gen_range(0..candidates.len())].clone();
            let (flo, fhi) = constraints.float_range;
            let (ilo, ihi) = constraints.int_range;
            let buffer = input.buffers.get_mut(&name).unwrap();
            let edits = rng.gen_range(1..=4usize.min(buffer.len()));
            for _ in 0..edits {
                let idx = rng.gen_range(0..buffer.len());
                match buffer {
                    Buffer::F64(v) => {
                        let op = rng.gen_range(0..4);
                        v[idx] = clamp_f64(
                            match op {
                                0 => v[idx] + (fhi - flo) * 0.05 * (rng.gen::<f64>() - 0.5),
                                1 => v[idx] * (0.5 + rng.gen::<f64>()),
                                2 => -v[idx],
                                _ => [0.0, flo, fhi][rng.gen_range(0..3)],
                            },
                            flo,
                            fhi,
                        );
                    }
                    Buffer::F32(v) => {
                        let op = rng.gen_range(0..4);
                        let cur = v[idx] as f64;
                        v[idx] = clamp_f64(
                            match op {
                                0 => cur + (fhi - flo) * 0.05 * (rng.gen::<f64>() - 0.5),
                                1 => cur * (0.5 + rng.gen::<f64>()),
                                2 => -cur,
                                _ => [0.0, flo, fhi][rng.gen_range(0..3)],
                            },
                            flo,
                            fhi,
                        ) as f32;
                    }
                    Buffer::I64(v) => {
                        let op = rng.gen_range(0..4);
                        v[idx] = match op {
                            0 => v[idx].saturating_add(1),
                            1 => v[idx].saturating_sub(1),
                            2 => v[idx].saturating_add(16 * if rng.gen_bool(0.5) { 1 } else { -1 }),
                            _ => [0, ilo, ihi][rng.gen_range(0..3)],
                        }
                        .clamp(ilo, ihi);
                    }
                    Buffer::I32(v) => {
                        let lo32 = ilo.max(i32::MIN as i64) as i32;
                        let hi32 = ihi.min(i32::MAX as i64) as i32;
                        let op = rng.gen_range(0..3);
                        v[idx] = match op {
                            0 => v[idx].saturating_add(1),
                            1 => v[idx].saturating_sub(1),
                            _ => [lo32, hi32][rng.gen_range(0..2)],
                        }
                        .clamp(lo32, hi32);
                    }
                    Buffer::Bool(v) => v[idx] = !v[idx],
                }
            }
        }
    }
    Ok(input)
}

/// True when every symbol and sampled buffer element satisfies the
/// constraints (used by the mutation property test).
pub fn satisfies(
    input: &ExecutionInput,
    constraints: &ConstraintSet,
    sampled: &[String],
) -> bool {
    for (name, c) in &constraints.symbols {
        let Some(v) = input.symbols.get(name) else { return false };
        let mut env = input.symbols.clone();
        env.remove(name);
        let (Ok(lo), Ok(hi)) = (c.lo.eval(&env), c.hi.eval(&env)) else {
            continue;
        };
        if *v < lo || *v >= hi {
            return false;
        }
        if let Some(m) = c.multiple_of {
            if v.rem_euclid(m.max(1)) != 0 {
                return false;
            }
        }
    }
    let (flo, fhi) = constraints.float_range;
    let (ilo, ihi) = constraints.int_range;
    let float_ok = |x: f64| {
        if x.is_finite() {
            x >= flo && x <= fhi
        } else {
            constraints.allow_nan_inf
        }
    };
    for name in sampled {
        let Some(buffer) = input.buffers.get(name) else { continue };
        let ok = match buffer {
            Buffer::F64(v) => v.iter().all(|x| float_ok(*x)),
            Buffer::F32(v) => v.iter().all(|x| float_ok(*x as f64)),
            Buffer::I64(v) => v.iter().all(|x| *x >= ilo && *x <= ihi),
            Buffer::I32(v) => v.iter().all(|x| (*x as i64) >= ilo && (*x as i64) <= ihi),
            Buffer::Bool(_) => true,
        };
        if !ok {
            return false;
        }
    }
    true
}
