//! Static energy accounting: operation slots priced under a per-operation
//! cost model, with an all-conv baseline for the reduction ratio.
//!
//! Paper mode prices only the SAPM main branches, treating each k x k
//! MAC position as one slot that costs a shift-branch op (one fixed-point
//! add, one shift) plus an adder-branch op (two fp32 adds); the baseline
//! prices the same slots as multiply-accumulate. Full mode also bills the
//! parts paper mode omits: the 1x1 whitening matmul, block shortcuts,
//! and (I)GDN arithmetic, with divides and square roots priced as
//! multiplies. Plain transform convolutions and the entropy models are
//! outside the comparison in both modes.

use crate::error::{Result, SapmError};
use crate::model::{LayerKind, Model};

/// Per-operation costs in picojoules (45 nm process figures).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub mult_fp32: f64,
    pub add_fp32: f64,
    pub add_fix32: f64,
    pub shift_fix32: f64,
}

impl Default for CostModel {
    fn default() -> CostModel {
        CostModel {
            mult_fp32: 3.70,
            add_fp32: 0.90,
            add_fix32: 0.10,
            shift_fix32: 0.13,
        }
    }
}

impl CostModel {
    /// One convolution slot: multiply + fp32 accumulate.
    pub fn conv_unit(&self) -> f64 {
        self.mult_fp32 + self.add_fp32
    }

    /// One SAPM slot: both branches together.
    pub fn sapm_unit(&self) -> f64 {
        self.adder_unit() + self.shift_unit()
    }

    /// Shift branch share of a slot: fixed-point add + shift.
    pub fn shift_unit(&self) -> f64 {
        self.add_fix32 + self.shift_fix32
    }

    /// Adder branch share of a slot: subtract + accumulate, both fp32;
    /// the absolute value is free sign manipulation.
    pub fn adder_unit(&self) -> f64 {
        2.0 * self.add_fp32
    }

    /// Energy improvement of each cheap op over an fp32 multiply:
    /// (fp32 add, fix32 add, shift).
    pub fn improvement_factors(&self) -> (f64, f64, f64) {
        (
            self.mult_fp32 / self.add_fp32,
            self.mult_fp32 / self.add_fix32,
            self.mult_fp32 / self.shift_fix32,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyMode {
    Paper,
    Full,
}

impl EnergyMode {
    pub fn parse(s: &str) -> Result<EnergyMode> {
        match s {
            "paper" => Ok(EnergyMode::Paper),
            "full" => Ok(EnergyMode::Full),
            other => Err(SapmError::config(format!("unknown energy mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnergyMode::Paper => "paper",
            EnergyMode::Full => "full",
        }
    }
}

/// MAC positions of a k x k layer.
pub fn slot_count(k: usize, cin: usize, cout: usize, hout: usize, wout: usize) -> u64 {
    (k * k * cin * cout * hout * wout) as u64
}

/// One priced row: operation counts and their energy.
#[derive(Debug, Clone)]
pub struct EnergyRow {
    pub name: String,
    pub slots: u64,
    pub mults: u64,
    pub adds_fp32: u64,
    pub adds_fix32: u64,
    pub shifts: u64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub mode: EnergyMode,
    pub rows: Vec<EnergyRow>,
    pub total_pj: f64,
    pub baseline_pj: f64,
    /// baseline / total; how many times cheaper than all-conv.
    pub ratio: f64,
    pub conv_unit: f64,
    pub sapm_unit: f64,
}

fn sapm_row(name: &str, slots: u64, cost: &CostModel) -> EnergyRow {
    EnergyRow {
        name: name.to_string(),
        slots,
        mults: 0,
        adds_fp32: 2 * slots,
        adds_fix32: slots,
        shifts: slots,
        energy_pj: slots as f64 * cost.sapm_unit(),
    }
}

fn mac_row(name: &str, slots: u64, cost: &CostModel) -> EnergyRow {
    EnergyRow {
        name: name.to_string(),
        slots,
        mults: slots,
        adds_fp32: slots,
        adds_fix32: 0,
        shifts: 0,
        energy_pj: slots as f64 * cost.conv_unit(),
    }
}

/// Static energy of `model` run on one `hin x win` input.
pub fn energy_report(
    model: &Model,
    hin: usize,
    win: usize,
    mode: EnergyMode,
    cost: &CostModel,
) -> Result<EnergyReport> {
    let ds = model.cfg.total_downsample();
    if hin == 0 || win == 0 || hin % ds != 0 || win % ds != 0 {
        return Err(SapmError::config(format!(
            "input {hin}x{win} is not a positive multiple of the downsampling factor {ds}"
        )));
    }
    let mut rows: Vec<EnergyRow> = Vec::new();
    let mut baseline = 0.0;
    let (mut h, mut w) = (hin, win);
    for d in model.layer_descs() {
        let (hout, wout) = (h / d.stride * d.up, w / d.stride * d.up);
        match d.kind {
            // Plain transform convolutions are shared with the baseline
            // network and outside the SAPM-vs-conv comparison.
            LayerKind::Conv | LayerKind::Deconv => {}
            LayerKind::SapmE | LayerKind::SapmD => {
                let slots = slot_count(d.k, d.cin, d.cout, hout, wout);
                baseline += slots as f64 * cost.conv_unit();
                rows.push(sapm_row(&d.name, slots, cost));
                if mode == EnergyMode::Full {
                    // Whitening: the centering and decorrelation fold into
                    // a single 1x1 matmul over the adder branch output.
                    let id_slots = match d.kind {
                        LayerKind::SapmE => slot_count(1, d.cout, d.cout, hout, wout),
                        _ => slot_count(1, d.cin, d.cout, hout, wout),
                    };
                    rows.push(mac_row(&format!("{}.id", d.name), id_slots, cost));
                    match d.kind {
                        LayerKind::SapmE => {
                            // Average pool over stride x stride windows:
                            // window sums plus one divide per output.
                            let outs = (d.cin * hout * wout) as u64;
                            let window = (d.stride * d.stride) as u64;
                            rows.push(EnergyRow {
                                name: format!("{}.shortcut", d.name),
                                slots: outs,
                                mults: outs,
                                adds_fp32: (window - 1) * outs,
                                adds_fix32: 0,
                                shifts: 0,
                                energy_pj: outs as f64 * cost.mult_fp32
                                    + ((window - 1) * outs) as f64 * cost.add_fp32,
                            });
                        }
                        _ => {
                            // 1x1 conv to cout*r*r channels, then a free
                            // pixel shuffle.
                            let slots = slot_count(1, d.cin, d.cout, hout, wout);
                            rows.push(mac_row(&format!("{}.shortcut", d.name), slots, cost));
                        }
                    }
                }
            }
            LayerKind::Gdn => {
                if mode == EnergyMode::Full {
                    // Square, 1x1 gamma conv, beta add, sqrt and divide
                    // (both priced as multiplies). The baseline keeps its
                    // normalization, so this bills both sides.
                    let c = d.cin as u64;
                    let elems = c * (hout * wout) as u64;
                    let conv_slots = slot_count(1, d.cin, d.cout, hout, wout);
                    let mults = 3 * elems + conv_slots;
                    let adds = elems + conv_slots;
                    let e = mults as f64 * cost.mult_fp32 + adds as f64 * cost.add_fp32;
                    rows.push(EnergyRow {
                        name: d.name.clone(),
                        slots: conv_slots,
                        mults,
                        adds_fp32: adds,
                        adds_fix32: 0,
                        shifts: 0,
                        energy_pj: e,
                    });
                    baseline += e;
                }
            }
        }
        h = hout;
        w = wout;
    }
    let total: f64 = rows.iter().map(|r| r.energy_pj).sum();
    Ok(EnergyReport {
        mode,
        rows,
        total_pj: total,
        baseline_pj: baseline,
        ratio: baseline / total,
        conv_unit: cost.conv_unit(),
        sapm_unit: cost.sapm_unit(),
    })
}

/// Human-readable table.
pub fn render_text(r: &EnergyReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "energy report (mode: {}, unit conv {:.2} pJ/slot, unit sapm {:.2} pJ/slot)\n",
        r.mode.name(),
        r.conv_unit,
        r.sapm_unit
    ));
    out.push_str(&format!(
        "{:<18} {:>12} {:>12} {:>12} {:>12} {:>12} {:>16}\n",
        "layer", "slots", "mults", "adds_fp32", "adds_fix32", "shifts", "energy_pJ"
    ));
    for row in &r.rows {
        out.push_str(&format!(
            "{:<18} {:>12} {:>12} {:>12} {:>12} {:>12} {:>16.1}\n",
            row.name,
            row.slots,
            row.mults,
            row.adds_fp32,
            row.adds_fix32,
            row.shifts,
            row.energy_pj
        ));
    }
    out.push_str(&format!(
        "total {:.1} pJ, all-conv baseline {:.1} pJ, reduction {:.3}x\n",
        r.total_pj, r.baseline_pj, r.ratio
    ));
    out
}

/// Comma-separated rows for plotting; one header line.
pub fn render_csv(r: &EnergyReport) -> String {
    let mut out = String::from("layer,slots,mults,adds_fp32,adds_fix32,shifts,energy_pj\n");
    for row in &r.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4}\n",
            row.name,
            row.slots,
            row.mults,
            row.adds_fp32,
            row.adds_fix32,
            row.shifts,
            row.energy_pj
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn unit_costs_match_published_values() {
        let c = CostModel::default();
        assert_eq!(format!("{:.2}", c.conv_unit()), "4.60");
        assert_eq!(format!("{:.2}", c.sapm_unit()), "2.03");
        assert_eq!(format!("{:.2}", c.shift_unit()), "0.23");
        assert_eq!(format!("{:.2}", c.adder_unit()), "1.80");
        let (f_add, f_fix, f_shift) = c.improvement_factors();
        assert_eq!(format!("{f_add:.1}"), "4.1");
        assert_eq!(format!("{f_fix:.0}"), "37");
        assert_eq!(format!("{f_shift:.1}"), "28.5");
    }

    #[test]
    fn slot_arithmetic() {
        assert_eq!(slot_count(5, 1, 1, 1, 1), 25);
        assert_eq!(slot_count(1, 7, 9, 4, 4), 7 * 9 * 16);
        // Stride 2 quarters the output plane.
        assert_eq!(slot_count(3, 2, 2, 8, 8), 4 * slot_count(3, 2, 2, 4, 4));
    }

    #[test]
    fn paper_mode_matches_hand_summed_desk_model() {
        // Default config (N=M=32, k=5, three levels) on a 64x64 input.
        // Slot counts by hand: enc.sapm0 25*32*32*16*16, enc.sapm1
        // 25*32*32*8*8, dec.sapm0 25*32*32*16*16, dec.sapm1 25*32*32*32*32.
        let model = Model::new(ModelConfig::default()).unwrap();
        let r = energy_report(&model, 64, 64, EnergyMode::Paper, &CostModel::default()).unwrap();
        let slots: Vec<u64> = r.rows.iter().map(|x| x.slots).collect();
        assert_eq!(slots, vec![6_553_600, 1_638_400, 6_553_600, 26_214_400]);
        let total_slots = 40_960_000u64;
        assert!((r.total_pj - total_slots as f64 * 2.03).abs() < 1.0);
        assert!((r.baseline_pj - total_slots as f64 * 4.60).abs() < 1.0);
        assert!((r.ratio - 4.60 / 2.03).abs() < 1e-9);
        assert!(r.ratio >= 2.2);
        // Totals equal the sum of rows.
        let row_sum: f64 = r.rows.iter().map(|x| x.energy_pj).sum();
        assert_eq!(row_sum, r.total_pj);
    }

    #[test]
    fn full_mode_bills_the_omitted_parts() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let cost = CostModel::default();
        let paper = energy_report(&model, 64, 64, EnergyMode::Paper, &cost).unwrap();
        let full = energy_report(&model, 64, 64, EnergyMode::Full, &cost).unwrap();
        assert!(full.total_pj > paper.total_pj);
        assert!(
            full.ratio < paper.ratio,
            "full {} vs paper {}",
            full.ratio,
            paper.ratio
        );
        // Spot-check the folded whitening matmul of the first encoder
        // block: 1x1 over 32 channels on a 16x16 plane.
        let id0 = full.rows.iter().find(|r| r.name == "enc.sapm0.id").unwrap();
        assert_eq!(id0.slots, 32 * 32 * 16 * 16);
        assert!((id0.energy_pj - id0.slots as f64 * 4.60).abs() < 1e-6);
        let sc = full
            .rows
            .iter()
            .find(|r| r.name == "enc.sapm0.shortcut")
            .unwrap();
        assert_eq!(sc.adds_fp32, 3 * 32 * 16 * 16);
        assert_eq!(sc.mults, 32 * 16 * 16);
    }

    #[test]
    fn bad_input_rejected() {
        let model = Model::new(ModelConfig::default()).unwrap();
        assert!(energy_report(&model, 50, 64, EnergyMode::Paper, &CostModel::default()).is_err());
        assert!(EnergyMode::parse("fast").is_err());
        assert_eq!(EnergyMode::parse("paper").unwrap(), EnergyMode::Paper);
    }
}
