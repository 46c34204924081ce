//! Exposure-index instrument built from point sources (fires) and receiving
//! units (census tracts).
//!
//! For tract `i` the raw index is `Zᵢ* = (1/|F|) Σ_f size(f)·m(f, i)/dist(f, i)^q`
//! over the fires `F` above a size cutoff, and the binary instrument is
//! `Zᵢ = 1{Zᵢ* ≥ c}`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IvError, Result};
use crate::estimator::fmt_f64;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FireRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub size_acres: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

fn check_coords(id: &str, lat: f64, lon: f64) -> Result<()> {
    if !(lat.is_finite() && (-90.0..=90.0).contains(&lat) && lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
        return Err(IvError::InvalidRecord(format!(
            "record {id}: coordinates ({lat}, {lon}) out of range"
        )));
    }
    Ok(())
}

impl FireRecord {
    pub fn validate(&self) -> Result<()> {
        check_coords(&self.id, self.lat, self.lon)?;
        if !(self.size_acres.is_finite() && self.size_acres > 0.0) {
            return Err(IvError::InvalidRecord(format!(
                "fire {}: size must be positive, got {}",
                self.id, self.size_acres
            )));
        }
        Ok(())
    }
}

impl TractRecord {
    pub fn validate(&self) -> Result<()> {
        check_coords(&self.id, self.lat, self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmokeVariant {
    InverseSquare,
    /// Fires west of the tract get weight `1 + w`.
    InverseSquareWestWeighted,
    InverseLinear,
}

impl SmokeVariant {
    pub fn exponent(self) -> i32 {
        match self {
            SmokeVariant::InverseSquare | SmokeVariant::InverseSquareWestWeighted => 2,
            SmokeVariant::InverseLinear => 1,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "inverse-square" => Some(SmokeVariant::InverseSquare),
            "inverse-square-west-weighted" => Some(SmokeVariant::InverseSquareWestWeighted),
            "inverse-linear" => Some(SmokeVariant::InverseLinear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokeIndexConfig {
    pub variant: SmokeVariant,
    /// Cutoff `c`; `None` keeps the continuous index (inverse-linear only).
    pub threshold: Option<f64>,
    pub west_weight: f64,
    pub min_size_acres: f64,
    pub min_distance_km: f64,
}

impl SmokeIndexConfig {
    pub fn new(variant: SmokeVariant, threshold: Option<f64>) -> Self {
        Self {
            variant,
            threshold,
            west_weight: 0.0,
            min_size_acres: 100.0,
            min_distance_km: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.west_weight.is_finite() && self.west_weight >= 0.0) {
            return Err(IvError::InvalidConfig("west_weight must be >= 0".into()));
        }
        if self.west_weight != 0.0 && self.variant != SmokeVariant::InverseSquareWestWeighted {
            return Err(IvError::InvalidConfig(
                "west_weight applies only to the west-weighted variant".into(),
            ));
        }
        if !(self.min_distance_km.is_finite() && self.min_distance_km > 0.0) {
            return Err(IvError::InvalidConfig("min_distance_km must be positive".into()));
        }
        if !self.min_size_acres.is_finite() {
            return Err(IvError::InvalidConfig("min_size_acres must be finite".into()));
        }
        match self.threshold {
            Some(c) if !c.is_finite() => {
                return Err(IvError::InvalidConfig("threshold must be finite".into()));
            }
            None if self.variant != SmokeVariant::InverseLinear => {
                return Err(IvError::InvalidConfig(
                    "only the inverse-linear variant may omit the threshold".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Great-circle distance in km by the haversine formula.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Raw indices `Zᵢ*`, one per tract, over fires with size ≥ `min_size_acres`.
pub fn smoke_index(tracts: &[TractRecord], fires: &[FireRecord], cfg: &SmokeIndexConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    for f in fires {
        f.validate()?;
    }
    for t in tracts {
        t.validate()?;
    }
    let used: Vec<&FireRecord> = fires.iter().filter(|f| f.size_acres >= cfg.min_size_acres).collect();
    if used.is_empty() {
        return Err(IvError::InvalidRecord(format!(
            "no fires of at least {} acres",
            cfg.min_size_acres
        )));
    }
    let q = cfg.variant.exponent();
    let west = cfg.variant == SmokeVariant::InverseSquareWestWeighted;
    let count = used.len() as f64;
    tracts
        .par_iter()
        .map(|t| {
            let mut total = 0.0;
            for f in &used {
                let mut weight = 1.0;
                if west {
                    if (f.lon - t.lon).abs() > 180.0 {
                        return Err(IvError::InvalidRecord(format!(
                            "fire {} and tract {} straddle the antimeridian",
                            f.id, t.id
                        )));
                    }
                    if f.lon < t.lon {
                        weight += cfg.west_weight;
                    }
                }
                let dist = haversine_km(f.lat, f.lon, t.lat, t.lon).max(cfg.min_distance_km);
                total += f.size_acres * weight / dist.powi(q);
            }
            Ok(total / count)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdSplit {
    pub z: Vec<u8>,
    pub ones: usize,
    pub zeros: usize,
    pub fraction_ones: f64,
}

/// `Zᵢ = 1{Zᵢ* ≥ c}` with the resulting split.
pub fn threshold_instrument(zstar: &[f64], c: f64) -> ThresholdSplit {
    let z: Vec<u8> = zstar.iter().map(|&v| u8::from(v >= c)).collect();
    let ones = z.iter().filter(|&&v| v == 1).count();
    let frac = if z.is_empty() { 0.0 } else { ones as f64 / z.len() as f64 };
    ThresholdSplit {
        zeros: z.len() - ones,
        z,
        ones,
        fraction_ones: frac,
    }
}

fn read_records<T: for<'de> Deserialize<'de>, R: Read>(reader: R, columns: &[&str]) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != columns {
        return Err(IvError::InvalidRecord(format!(
            "expected columns {}, found {}",
            columns.join(","),
            names.join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Fires CSV with header `id,lat,lon,size_acres`.
pub fn read_fires<R: Read>(reader: R) -> Result<Vec<FireRecord>> {
    let fires: Vec<FireRecord> = read_records(reader, &["id", "lat", "lon", "size_acres"])?;
    fires.iter().try_for_each(FireRecord::validate)?;
    Ok(fires)
}

/// Tracts CSV with header `id,lat,lon`.
pub fn read_tracts<R: Read>(reader: R) -> Result<Vec<TractRecord>> {
    let tracts: Vec<TractRecord> = read_records(reader, &["id", "lat", "lon"])?;
    tracts.iter().try_for_each(TractRecord::validate)?;
    Ok(tracts)
}

/// Output CSV `id,z_star,z`; `z` repeats `z_star` when no threshold is set.
pub fn write_index_csv<W: Write>(
    writer: W,
    tracts: &[TractRecord],
    zstar: &[f64],
    split: Option<&ThresholdSplit>,
) -> Result<()> {
    if zstar.len() != tracts.len() || split.is_some_and(|s| s.z.len() != tracts.len()) {
        return Err(IvError::Shape("index length does not match tracts".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "z_star", "z"])?;
    for (i, t) in tracts.iter().enumerate() {
        let z = match split {
            Some(s) => s.z[i].to_string(),
            None => fmt_f64(zstar[i]),
        };
        w.write_record([t.id.clone(), fmt_f64(zstar[i]), z])?;
    }
    w.flush()?;
    Ok(())
}

/// Metadata describing how an index was built.
#[derive(Debug, Clone, Serialize)]
pub struct InstrumentReport {
    pub schema_version: u32,
    pub config: SmokeIndexConfig,
    pub exponent: i32,
    pub distance_metric: String,
    pub earth_radius_km: f64,
    pub fires_total: usize,
    pub fires_used: usize,
    pub tracts: usize,
    pub ones: Option<usize>,
    pub zeros: Option<usize>,
    pub fraction_ones: Option<f64>,
}

impl InstrumentReport {
    pub fn new(cfg: &SmokeIndexConfig, fires: &[FireRecord], tracts: usize, split: Option<&ThresholdSplit>) -> Self {
        Self {
            schema_version: crate::SCHEMA_VERSION,
            config: cfg.clone(),
            exponent: cfg.variant.exponent(),
            distance_metric: "haversine".into(),
            earth_radius_km: EARTH_RADIUS_KM,
            fires_total: fires.len(),
            fires_used: fires.iter().filter(|f| f.size_acres >= cfg.min_size_acres).count(),
            tracts,
            ones: split.map(|s| s.ones),
            zeros: split.map(|s| s.zeros),
            fraction_ones: split.map(|s| s.fraction_ones),
        }
    }
}
