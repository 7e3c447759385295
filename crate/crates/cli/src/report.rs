use std::io::Write;

use cellflow_core::runner::{FdReport, RunResult, SpeedReport, Summary};
use serde::Serialize;

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

pub fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, mut out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn speed_text(rows: &[SpeedReport], mut out: impl Write) -> Result<()> {
    writeln!(out, "{:<24} {:>13} {:>6} {:>7} {:>9} {:>12} {:>12}", "scenario", "intersections", "cells", "steps", "wall_s", "steps/s", "speedup")?;
    for r in rows {
        writeln!(
            out,
            "{:<24} {:>13} {:>6} {:>7} {:>9.3} {:>12.0} {:>11.0}x",
            r.scenario, r.intersections, r.cells, r.steps, r.wall_s, r.steps_per_s, r.speedup
        )?;
    }
    Ok(())
}

/// One CSV row per seed. Column order is part of the interface.
#[derive(Serialize)]
pub struct EvalRow<'a> {
    scenario: &'a str,
    controller: &'a str,
    seed: u64,
    throughput: f64,
    delay: f64,
    queue: f64,
    wall_s: f64,
    steps_per_s: f64,
}

#[derive(Serialize)]
pub struct EvalReport {
    pub runs: Vec<RunResult>,
    pub throughput: Summary,
    pub delay: Summary,
    pub queue: Summary,
}

impl EvalReport {
    pub fn of(runs: Vec<RunResult>) -> Self {
        let stat = |f: fn(&RunResult) -> f64| Summary::of(runs.iter().map(f));
        Self { throughput: stat(|r| r.throughput), delay: stat(|r| r.delay), queue: stat(|r| r.queue), runs }
    }

    pub fn rows(&self) -> Vec<EvalRow<'_>> {
        self.runs
            .iter()
            .map(|r| EvalRow {
                scenario: &r.scenario,
                controller: &r.controller,
                seed: r.seed,
                throughput: r.throughput,
                delay: r.delay,
                queue: r.queue,
                wall_s: r.wall_s,
                steps_per_s: r.steps_per_s,
            })
            .collect()
    }
}

pub fn eval_text(rep: &EvalReport, mut out: impl Write) -> Result<()> {
    let first = &rep.runs[0];
    writeln!(out, "{} / {} over {} seed(s)", first.scenario, first.controller, rep.runs.len())?;
    writeln!(out, "{:>6} {:>12} {:>10} {:>10} {:>12}", "seed", "throughput", "delay_s", "queue", "steps/s")?;
    for r in &rep.runs {
        writeln!(out, "{:>6} {:>12.1} {:>10.2} {:>10.2} {:>12.0}", r.seed, r.throughput, r.delay, r.queue, r.steps_per_s)?;
    }
    let pm = |s: &Summary| format!("{:.2} ± {:.2}", s.mean, s.std);
    writeln!(out, "throughput {}", pm(&rep.throughput))?;
    writeln!(out, "delay      {} s/veh", pm(&rep.delay))?;
    writeln!(out, "queue      {} veh", pm(&rep.queue))?;
    Ok(())
}

#[derive(Serialize)]
pub struct FdSummary {
    levels: usize,
    free_flow_slope: f64,
    free_flow_r2: f64,
    congested_slope: f64,
    congested_r2: f64,
    critical_k: f64,
    critical_q: f64,
}

impl FdSummary {
    pub fn of(fd: &FdReport) -> Self {
        Self {
            levels: fd.points.len(),
            free_flow_slope: fd.free_flow.slope,
            free_flow_r2: fd.free_flow.r2,
            congested_slope: fd.congested.slope,
            congested_r2: fd.congested.r2,
            critical_k: fd.critical.0,
            critical_q: fd.critical.1,
        }
    }
}

pub fn fd_text(s: &FdSummary, mut out: impl Write) -> Result<()> {
    writeln!(out, "levels          {}", s.levels)?;
    writeln!(out, "free-flow       slope {:.4} m/s   R2 {:.6}", s.free_flow_slope, s.free_flow_r2)?;
    writeln!(out, "congested       slope {:.4} m/s   R2 {:.6}", s.congested_slope, s.congested_r2)?;
    writeln!(out, "critical point  k {:.5} veh/m   q {:.4} veh/s", s.critical_k, s.critical_q)?;
    Ok(())
}
