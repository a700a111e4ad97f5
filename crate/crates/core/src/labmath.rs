//! Pre-lab calculations: personalized pump, R-L identification, cable
//! selection, capacitor sizing and cable loss comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::circuit::{loss_comparison, RigConfig};
use crate::error::LabMathError;
use crate::scalar::Scalar;

pub const BASE_PUMP_WATTS: f64 = 7500.0;
pub const RATED_POWER_FACTOR: f64 = 0.87;
pub const SUPPLY_VRMS: f64 = 230.0;
/// Cable ampacity headroom over rated current.
pub const CABLE_MARGIN: f64 = 1.25;
pub const DEFAULT_CABLE_LENGTH_M: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpSpec<T> {
    pub registration_number: u64,
    pub z_factor: u8,
    pub p_rated: T,
    pub pf_rated: T,
    pub v_supply: T,
}

impl<T: Scalar> PumpSpec<T> {
    pub fn with_power_factor(mut self, pf: T) -> Self {
        self.pf_rated = pf;
        self
    }

    pub fn apparent_power(&self) -> T {
        self.p_rated / self.pf_rated
    }

    pub fn rated_current(&self) -> T {
        self.apparent_power() / self.v_supply
    }

    /// Reactive power drawn at rated load, `P·tan(acos pf)`.
    pub fn reactive_power(&self) -> T {
        self.p_rated * self.pf_rated.acos().tan()
    }
}

/// Assigns the student's pump: `Z = (reg mod 3) + 1`, `P = 7.5·Z kW`.
pub fn personalize<T: Scalar>(registration_number: i64) -> Result<PumpSpec<T>, LabMathError> {
    if registration_number < 0 {
        return Err(LabMathError::NegativeRegistration(registration_number));
    }
    let reg = registration_number as u64;
    let z_factor = (reg % 3) as u8 + 1;
    Ok(PumpSpec {
        registration_number: reg,
        z_factor,
        p_rated: T::of(BASE_PUMP_WATTS * z_factor as f64),
        pf_rated: T::of(RATED_POWER_FACTOR),
        v_supply: T::of(SUPPLY_VRMS),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesRL<T> {
    pub r: T,
    pub l: T,
}

fn check_pf<T: Scalar>(pf: T) -> Result<(), LabMathError> {
    if pf.is_finite() && pf > T::zero() && pf <= T::one() {
        Ok(())
    } else {
        Err(LabMathError::InvalidPowerFactor(pf.to_f64_lossy()))
    }
}

fn check_positive<T: Scalar>(name: &str, x: T) -> Result<(), LabMathError> {
    if x.is_finite() && x > T::zero() {
        Ok(())
    } else {
        Err(LabMathError::InvalidArgument(format!("{name} must be > 0, got {x}")))
    }
}

/// Series R-L equivalent of the pump at rated load.
pub fn identify_rl<T: Scalar>(spec: &PumpSpec<T>, frequency: T) -> Result<SeriesRL<T>, LabMathError> {
    check_pf(spec.pf_rated)?;
    check_positive("frequency", frequency)?;
    check_positive("p_rated", spec.p_rated)?;
    check_positive("v_supply", spec.v_supply)?;
    let current = spec.rated_current();
    let z = spec.v_supply / current;
    let r = z * spec.pf_rated;
    let x = z * spec.pf_rated.acos().sin();
    Ok(SeriesRL { r, l: x / (T::TAU() * frequency) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CableSpec<T> {
    pub label: String,
    /// mm²
    pub cross_section: T,
    pub r_per_km: T,
    pub ampacity: T,
}

/// Replaceable default: six copper sizes with IEC 60228 conductor
/// resistances and ampacities for two-core PVC cable clipped direct.
pub fn default_cable_table<T: Scalar>() -> Vec<CableSpec<T>> {
    [
        ("2.5 mm2 Cu", 2.5, 7.41, 27.0),
        ("6 mm2 Cu", 6.0, 3.08, 47.0),
        ("10 mm2 Cu", 10.0, 1.83, 64.0),
        ("16 mm2 Cu", 16.0, 1.15, 85.0),
        ("25 mm2 Cu", 25.0, 0.727, 114.0),
        ("35 mm2 Cu", 35.0, 0.524, 141.0),
    ]
    .into_iter()
    .map(|(label, cs, r, a)| CableSpec {
        label: label.to_string(),
        cross_section: T::of(cs),
        r_per_km: T::of(r),
        ampacity: T::of(a),
    })
    .collect()
}

/// Checks the table invariants: positive data, ascending cross-section.
pub fn validate_cable_table<T: Scalar>(table: &[CableSpec<T>]) -> Result<(), LabMathError> {
    for c in table {
        check_positive("cable r_per_km", c.r_per_km)?;
        check_positive("cable ampacity", c.ampacity)?;
        check_positive("cable cross_section", c.cross_section)?;
    }
    if table.windows(2).any(|w| w[0].cross_section >= w[1].cross_section) {
        return Err(LabMathError::InvalidArgument(
            "cable table must be sorted by ascending cross_section".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CableSelection<T> {
    pub cable: CableSpec<T>,
    pub length_m: T,
    /// Conductor resistance over the run, `r_per_km × length / 1000`.
    pub resistance: T,
    pub design_current: T,
}

/// Smallest cross-section whose ampacity covers 1.25 × rated current.
pub fn select_cable<T: Scalar>(
    spec: &PumpSpec<T>,
    table: &[CableSpec<T>],
    length_m: T,
) -> Result<CableSelection<T>, LabMathError> {
    check_positive("length_m", length_m)?;
    let rated = if spec.p_rated > T::zero() {
        check_pf(spec.pf_rated)?;
        spec.rated_current()
    } else {
        T::zero()
    };
    let design_current = rated * T::of(CABLE_MARGIN);
    let chosen = table
        .iter()
        .filter(|c| c.ampacity >= design_current)
        .min_by(|a, b| a.cross_section.partial_cmp(&b.cross_section).expect("finite cross-section"))
        .ok_or(LabMathError::NoAdequateCable { required: design_current.to_f64_lossy() })?;
    Ok(CableSelection {
        cable: chosen.clone(),
        length_m,
        resistance: chosen.r_per_km * length_m / T::of(1000.0),
        design_current,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacitorSizing<T> {
    pub target_pf: T,
    pub q_load: T,
    pub q_required: T,
    pub capacitance: T,
}

/// Shunt capacitance lifting the pump to `target_pf` (lagging), using the
/// constant-(P, V) reactive power balance.
pub fn size_capacitor<T: Scalar>(
    spec: &PumpSpec<T>,
    target_pf: T,
    frequency: T,
) -> Result<CapacitorSizing<T>, LabMathError> {
    check_pf(spec.pf_rated)?;
    check_pf(target_pf)?;
    check_positive("frequency", frequency)?;
    if target_pf <= spec.pf_rated {
        return Err(LabMathError::TargetNotAboveRated {
            target: target_pf.to_f64_lossy(),
            rated: spec.pf_rated.to_f64_lossy(),
        });
    }
    let q_load = spec.reactive_power();
    let q_required = q_load - spec.p_rated * target_pf.acos().tan();
    let omega = T::TAU() * frequency;
    let capacitance = q_required / (omega * spec.v_supply * spec.v_supply);
    Ok(CapacitorSizing { target_pf, q_load, q_required, capacitance })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult<T> {
    pub q_required: T,
    pub capacitance: T,
    pub i_before: T,
    pub i_after: T,
    pub loss_before: T,
    pub loss_after: T,
    pub vdrop_before: T,
    pub vdrop_after: T,
}

/// Rig configuration for the pump on the selected cable, capacitor `c`.
pub fn pump_config<T: Scalar>(
    spec: &PumpSpec<T>,
    rl: &SeriesRL<T>,
    cable_resistance: T,
    capacitance: T,
    frequency: T,
) -> RigConfig<T> {
    RigConfig {
        source_vrms: spec.v_supply,
        frequency,
        load_r: rl.r,
        load_l: rl.l,
        cap_c: capacitance,
        cable_r: cable_resistance,
        cable_x: T::zero(),
        sample_rate: (T::of(10_000.0)).max(T::of(200.0) * frequency),
        ..RigConfig::default()
    }
}

/// Cable loss and voltage drop before and after adding `capacitance`,
/// solved on the full network.
pub fn compare_losses<T: Scalar>(
    spec: &PumpSpec<T>,
    cable: &CableSelection<T>,
    capacitance: T,
    frequency: T,
) -> Result<CorrectionResult<T>, LabMathError> {
    if !(capacitance.is_finite() && capacitance >= T::zero()) {
        return Err(LabMathError::InvalidArgument(format!(
            "capacitance must be >= 0, got {capacitance}"
        )));
    }
    let rl = identify_rl(spec, frequency)?;
    let config = pump_config(spec, &rl, cable.resistance, capacitance, frequency);
    let cmp = loss_comparison(&config, T::one())?;
    let omega = T::TAU() * frequency;
    Ok(CorrectionResult {
        q_required: omega * capacitance * spec.v_supply * spec.v_supply,
        capacitance,
        i_before: cmp.without.i_source.magnitude,
        i_after: cmp.with.i_source.magnitude,
        loss_before: cmp.without.p_cable_loss,
        loss_after: cmp.with.p_cable_loss,
        vdrop_before: cmp.without.v_drop_cable,
        vdrop_after: cmp.with.v_drop_cable,
    })
}

/// Everything the pre-lab asks for, in one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrelabReport<T> {
    pub frequency: T,
    pub pump: PumpSpec<T>,
    pub load: SeriesRL<T>,
    pub cable: CableSelection<T>,
    pub sizing: CapacitorSizing<T>,
    pub correction: CorrectionResult<T>,
}

pub fn prelab_report<T: Scalar>(
    registration_number: i64,
    target_pf: T,
    length_m: T,
    frequency: T,
    table: &[CableSpec<T>],
) -> Result<PrelabReport<T>, LabMathError> {
    let pump = personalize::<T>(registration_number)?;
    let load = identify_rl(&pump, frequency)?;
    let cable = select_cable(&pump, table, length_m)?;
    let sizing = size_capacitor(&pump, target_pf, frequency)?;
    let correction = compare_losses(&pump, &cable, sizing.capacitance, frequency)?;
    Ok(PrelabReport { frequency, pump, load, cable, sizing, correction })
}

impl<T: Scalar> PrelabReport<T> {
    /// `key: value` lines, SI units spelled out in the key suffix.
    pub fn to_text(&self) -> String {
        let f = |x: T| x.to_f64_lossy();
        let c = &self.correction;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k}: {v}");
        };
        line("registration_number", self.pump.registration_number.to_string());
        line("z_factor", self.pump.z_factor.to_string());
        line("p_rated_kw", format!("{:.3}", f(self.pump.p_rated) / 1e3));
        line("pf_rated", format!("{:.4}", f(self.pump.pf_rated)));
        line("v_supply_v", format!("{:.1}", f(self.pump.v_supply)));
        line("frequency_hz", format!("{}", f(self.frequency)));
        line("rated_current_a", format!("{:.3}", f(self.pump.rated_current())));
        line("load_r_ohm", format!("{:.4}", f(self.load.r)));
        line("load_l_mh", format!("{:.4}", f(self.load.l) * 1e3));
        line("cable", self.cable.cable.label.clone());
        line("cable_length_m", format!("{}", f(self.cable.length_m)));
        line("cable_design_current_a", format!("{:.3}", f(self.cable.design_current)));
        line("cable_ampacity_a", format!("{}", f(self.cable.cable.ampacity)));
        line("cable_resistance_ohm", format!("{:.5}", f(self.cable.resistance)));
        line("target_pf", format!("{:.4}", f(self.sizing.target_pf)));
        line("q_load_kvar", format!("{:.4}", f(self.sizing.q_load) / 1e3));
        line("q_required_kvar", format!("{:.4}", f(self.sizing.q_required) / 1e3));
        line("capacitance_uf", format!("{:.2}", f(self.sizing.capacitance) * 1e6));
        line("i_before_a", format!("{:.3}", f(c.i_before)));
        line("i_after_a", format!("{:.3}", f(c.i_after)));
        line("loss_before_w", format!("{:.3}", f(c.loss_before)));
        line("loss_after_w", format!("{:.3}", f(c.loss_after)));
        line("vdrop_before_v", format!("{:.4}", f(c.vdrop_before)));
        line("vdrop_after_v", format!("{:.4}", f(c.vdrop_after)));
        out
    }
}
