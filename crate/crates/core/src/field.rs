//! Node data on a lattice: R^d-valued fields, unit-norm sphere fields,
//! presets, interpolation, and the dump/CSV formats.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, precondition, Error, Result};
use crate::lattice::Lattice;

/// R^d values per node, stored node-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub d: usize,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(n_nodes: usize, d: usize) -> Self {
        Self { d, values: vec![0.0; n_nodes * d] }
    }

    pub fn from_fn<F: Fn(&[f64]) -> Vec<f64>>(lat: &Lattice, d: usize, f: F) -> Self {
        let mut values = Vec::with_capacity(lat.n_nodes * d);
        for node in 0..lat.n_nodes {
            let v = f(&lat.coord(node));
            assert_eq!(v.len(), d);
            values.extend_from_slice(&v);
        }
        Self { d, values }
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len() / self.d
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.d..(i + 1) * self.d]
    }

    /// Component `c` as a scalar field.
    pub fn component(&self, c: usize) -> Field {
        Field { d: 1, values: (0..self.n_nodes()).map(|i| self.values[i * self.d + c]).collect() }
    }

    pub fn check_lattice(&self, lat: &Lattice) -> Result<()> {
        if self.n_nodes() != lat.n_nodes {
            return Err(Error::Usage(format!("field has {} nodes, lattice has {}", self.n_nodes(), lat.n_nodes)));
        }
        Ok(())
    }

    pub fn max_norm_defect(&self) -> f64 {
        (0..self.n_nodes()).map(|i| (norm(self.get(i)) - 1.0).abs()).fold(0.0, f64::max)
    }
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Field with |u_i| = 1 at every node (to 1e-12).
#[derive(Clone, Debug, PartialEq)]
pub struct SphereField(Field);

pub const UNIT_TOL: f64 = 1e-12;

impl SphereField {
    pub fn new(field: Field) -> Result<Self> {
        let defect = field.max_norm_defect();
        if !(defect <= UNIT_TOL) {
            return Err(precondition(format!("field is not unit-norm (max defect {defect:e})")));
        }
        Ok(Self(field))
    }

    /// Normalise every node; fails if some node has norm below `min_norm`.
    pub fn normalized(mut field: Field, min_norm: f64) -> Result<Self> {
        for i in 0..field.n_nodes() {
            let v = field.get_mut(i);
            let r = norm(v);
            if !(r >= min_norm) {
                return Err(domain(format!("cannot normalise node {i}: norm {r:e}")));
            }
            v.iter_mut().for_each(|x| *x /= r);
        }
        Ok(Self(field))
    }

    pub fn field(&self) -> &Field {
        &self.0
    }

    pub fn into_field(self) -> Field {
        self.0
    }

    pub fn d(&self) -> usize {
        self.0.d
    }
}

impl std::ops::Deref for SphereField {
    type Target = Field;
    fn deref(&self) -> &Field {
        &self.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PresetParams {
    /// Radius of the set E for `char-ball`.
    pub radius: f64,
    /// Number of half-turns across the box for `winding`.
    pub winding: f64,
    /// Base preset for `random-perturbation`.
    pub base: String,
    /// Noise amplitude for `random-perturbation`.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for PresetParams {
    fn default() -> Self {
        Self { radius: 0.5, winding: 1.0, base: "constant".into(), amplitude: 0.3, seed: 0x5EED }
    }
}

fn embed_sign(sign: f64, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[0] = sign;
    v
}

/// A map R^n → R^d defined everywhere, shared across threads.
pub type MapFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// The deterministic presets as maps on all of R^n (used for lattice data and for the
/// exterior part of the Poisson extension). `random-perturbation` resolves to its base map.
pub fn preset_map(name: &str, n: usize, d: usize, h: f64, l_ext: f64, p: &PresetParams) -> Result<MapFn> {
    let f: MapFn = match name {
        "constant" => Arc::new(move |_: &[f64]| embed_sign(1.0, d)),
        "hedgehog" => {
            if n < 2 || d < n {
                return Err(config(format!("hedgehog needs n >= 2 and d >= n (n={n}, d={d})")));
            }
            let tiny = 1e-9 * h;
            Arc::new(move |x: &[f64]| {
                let r = norm(x);
                if r < tiny {
                    embed_sign(1.0, d)
                } else {
                    let mut v = vec![0.0; d];
                    v[..n].iter_mut().zip(x).for_each(|(a, b)| *a = b / r);
                    v
                }
            })
        }
        "char-ball" => {
            let radius = p.radius;
            Arc::new(move |x: &[f64]| embed_sign(if norm(x) <= radius { 1.0 } else { -1.0 }, d))
        }
        "step" => Arc::new(move |x: &[f64]| embed_sign(if x[0] > 0.0 { 1.0 } else { -1.0 }, d)),
        "winding" => {
            if d < 2 {
                return Err(config("winding needs d >= 2"));
            }
            let freq = p.winding * std::f64::consts::PI / (2.0 * l_ext);
            Arc::new(move |x: &[f64]| {
                let t = freq * (x[0] + l_ext);
                let mut v = vec![0.0; d];
                v[0] = t.cos();
                v[1] = t.sin();
                v
            })
        }
        "random-perturbation" => {
            if p.base == "random-perturbation" {
                return Err(config("random-perturbation cannot perturb itself"));
            }
            return preset_map(&p.base, n, d, h, l_ext, p);
        }
        other => return Err(config(format!("unknown preset `{other}`"))),
    };
    Ok(f)
}

/// Named preset maps into S^{d-1}.
pub fn preset_field(lat: &Lattice, name: &str, p: &PresetParams) -> Result<SphereField> {
    let d = lat.params.d;
    let map = preset_map(name, lat.dim(), d, lat.h, lat.l_ext, p)?;
    let mut f = Field::from_fn(lat, d, |x| map(x));
    if name == "random-perturbation" {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        for i in 0..lat.n_nodes {
            let noise: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if !lat.is_omega(i) {
                continue;
            }
            let v = f.get_mut(i);
            if d == 1 {
                // S^0 perturbation: flip sign with probability amplitude/2
                if (noise[0] + 1.0) * 0.5 < p.amplitude * 0.5 {
                    v[0] *= -1.0;
                }
            } else {
                for (a, b) in v.iter_mut().zip(&noise) {
                    *a += p.amplitude * b;
                }
            }
        }
    }
    SphereField::normalized(f, 1e-8)
}

/// Random unit field (uniform directions from Gaussian samples), fixed seed.
pub fn random_unit_field(lat: &Lattice, d: usize, seed: u64) -> SphereField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Field::zeros(lat.n_nodes, d);
    for i in 0..lat.n_nodes {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = norm(&v);
            if r > 1e-3 && r <= 1.0 {
                f.get_mut(i).iter_mut().zip(&v).for_each(|(a, b)| *a = b / r);
                break;
            }
        }
    }
    SphereField::normalized(f, 0.5).expect("unit samples")
}

/// Multilinear interpolation of `f` at point `x`; `None` outside the box.
pub fn interpolate(lat: &Lattice, f: &Field, x: &[f64]) -> Option<Vec<f64>> {
    let n = lat.dim();
    let last = (lat.side - 1) as f64;
    let mut base = vec![0usize; n];
    let mut frac = vec![0.0; n];
    for a in 0..n {
        let t = x[a] / lat.h + lat.k as f64;
        if t < -1e-9 || t > last + 1e-9 {
            return None;
        }
        let t = t.clamp(0.0, last);
        let i = (t.floor() as usize).min(lat.side - 2);
        base[a] = i;
        frac[a] = t - i as f64;
    }
    let mut out = vec![0.0; f.d];
    let mut idx = vec![0usize; n];
    for corner in 0..(1usize << n) {
        let mut wgt = 1.0;
        for a in 0..n {
            let bit = (corner >> a) & 1;
            idx[a] = base[a] + bit;
            wgt *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if wgt == 0.0 {
            continue;
        }
        let v = f.get(lat.node_of(&idx));
        for c in 0..f.d {
            out[c] += wgt * v[c];
        }
    }
    Some(out)
}

/// Header fields of a field dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpHeader {
    pub n: usize,
    pub d: usize,
    pub h: f64,
    pub l: f64,
    pub l_ext: f64,
    pub s: f64,
    pub nodes: usize,
}

const DUMP_MAGIC: &str = "FRACMAP-FIELD 1";

/// Text header (one `key value` per line, terminated by `end`) followed by
/// node-major little-endian f64 values.
pub fn write_dump<W: Write>(mut w: W, lat: &Lattice, f: &Field) -> Result<()> {
    writeln!(w, "{DUMP_MAGIC}")?;
    writeln!(w, "n {}", lat.dim())?;
    writeln!(w, "d {}", f.d)?;
    writeln!(w, "h {:?}", lat.h)?;
    writeln!(w, "L {:?}", lat.l)?;
    writeln!(w, "L_ext {:?}", lat.l_ext)?;
    writeln!(w, "s {:?}", lat.params.s)?;
    writeln!(w, "nodes {}", f.n_nodes())?;
    writeln!(w, "end")?;
    write_f64s(&mut w, &f.values)
}

pub fn read_dump<R: BufRead>(mut r: R) -> Result<(DumpHeader, Field)> {
    let kv = read_header(&mut r, DUMP_MAGIC)?;
    let hdr = DumpHeader {
        n: kv.usize("n")?,
        d: kv.usize("d")?,
        h: kv.f64("h")?,
        l: kv.f64("L")?,
        l_ext: kv.f64("L_ext")?,
        s: kv.f64("s")?,
        nodes: kv.usize("nodes")?,
    };
    let values = read_f64s(&mut r, hdr.nodes * hdr.d)?;
    Ok((hdr.clone(), Field { d: hdr.d, values }))
}

/// `key value` lines of a dump header.
pub(crate) struct HeaderMap(std::collections::HashMap<String, String>);

impl HeaderMap {
    pub(crate) fn str(&self, k: &str) -> Result<&str> {
        self.0.get(k).map(|s| s.as_str()).ok_or_else(|| Error::Usage(format!("dump header misses `{k}`")))
    }

    pub(crate) fn usize(&self, k: &str) -> Result<usize> {
        self.str(k)?.parse().map_err(|_| Error::Usage(format!("bad `{k}`")))
    }

    pub(crate) fn f64(&self, k: &str) -> Result<f64> {
        self.str(k)?.parse().map_err(|_| Error::Usage(format!("bad `{k}`")))
    }

    /// Space-separated list.
    pub(crate) fn list<T: std::str::FromStr>(&self, k: &str) -> Result<Vec<T>> {
        self.str(k)?.split_whitespace().map(|t| t.parse().map_err(|_| Error::Usage(format!("bad `{k}`")))).collect()
    }
}

pub(crate) fn read_header<R: BufRead>(r: &mut R, magic: &str) -> Result<HeaderMap> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != magic {
        return Err(Error::Usage(format!("expected a `{magic}` dump")));
    }
    let mut kv = std::collections::HashMap::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Usage("truncated dump header".into()));
        }
        let t = line.trim();
        if t == "end" {
            break;
        }
        let mut it = t.splitn(2, ' ');
        let k = it.next().unwrap_or("").to_string();
        let v = it.next().unwrap_or("").to_string();
        kv.insert(k, v);
    }
    Ok(HeaderMap(kv))
}

pub(crate) fn read_f64s<R: BufRead>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// CSV with coordinate columns followed by value columns (n <= 2).
pub fn write_csv<W: Write>(mut w: W, lat: &Lattice, f: &Field) -> Result<()> {
    let n = lat.dim();
    if n > 2 {
        return Err(Error::Usage("CSV export supports n <= 2".into()));
    }
    let mut head: Vec<String> = (1..=n).map(|a| format!("x{a}")).collect();
    head.extend((1..=f.d).map(|c| format!("u{c}")));
    writeln!(w, "{}", head.join(","))?;
    for node in 0..lat.n_nodes {
        let mut row: Vec<String> = lat.coord(node).iter().map(|x| format!("{x:?}")).collect();
        row.extend(f.get(node).iter().map(|v| format!("{v:?}")));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::FracParams;
    use crate::lattice::build_lattice;

    fn lat2(d: usize) -> Lattice {
        build_lattice(&FracParams::new(2, 0.5, d).unwrap(), 0.25, 1.0, 2.0, 2, 4).unwrap()
    }

    #[test]
    fn presets() {
        let lat = lat2(2);
        let p = PresetParams::default();
        let c = preset_field(&lat, "constant", &p).unwrap();
        assert!(c.values.chunks(2).all(|v| v == [1.0, 0.0]));
        let hh = preset_field(&lat, "hedgehog", &p).unwrap();
        assert_eq!(hh.get(lat.nearest_node(&[1.0, 0.0])), &[1.0, 0.0]);
        assert_eq!(hh.get(lat.nearest_node(&[0.0, 0.0])), &[1.0, 0.0]);
        let cb = preset_field(&lat, "char-ball", &PresetParams { radius: 1.0, ..p.clone() }).unwrap();
        assert_eq!(cb.get(lat.nearest_node(&[2.0, 0.0])), &[-1.0, 0.0]);
        assert!(preset_field(&lat2(1), "hedgehog", &p).is_err());
        assert!(preset_field(&lat, "nope", &p).is_err());
        let r = preset_field(&lat, "random-perturbation", &PresetParams { base: "hedgehog".into(), ..p }).unwrap();
        assert!(r.max_norm_defect() <= UNIT_TOL);
    }

    #[test]
    fn dump_roundtrip() {
        let lat = lat2(2);
        let f = random_unit_field(&lat, 2, 7).into_field();
        let mut buf = Vec::new();
        write_dump(&mut buf, &lat, &f).unwrap();
        let (hdr, g) = read_dump(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(hdr.nodes, lat.n_nodes);
        assert_eq!(hdr.h, 0.25);
        assert_eq!(f, g);
    }

    #[test]
    fn interpolation_reproduces_linear() {
        let lat = lat2(1);
        let f = Field::from_fn(&lat, 1, |x| vec![2.0 * x[0] - x[1] + 0.5]);
        let v = interpolate(&lat, &f, &[0.33, -1.71]).unwrap();
        assert!((v[0] - (0.66 + 1.71 + 0.5)).abs() < 1e-13);
        assert!(interpolate(&lat, &f, &[2.5, 0.0]).is_none());
    }
}
