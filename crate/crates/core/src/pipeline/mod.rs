//! Per-frame orchestration: track, map, check the keyframe trigger, and on
//! submap completion fuse its surface, detect and register loops, optimize
//! the pose graph and correct the map.

mod config;
mod output;

pub use config::{LoopParams, Mode, OutlierInjection, PipelineConfig};
pub use output::{write_outputs, RunMetrics};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;

use crate::cloud::{voxel_downsample, PointCloud};
use crate::dataio::Sequence;
use crate::error::{Result, SlamError};
use crate::fusion::{fuse_submap_surface, FusionParams};
use crate::geometry::{ate_rmse, Pose, Trajectory};
use crate::metrics::f_score;
use crate::place::{dynamic_threshold, BowVector, KeyframeDatabase, Vocabulary};
use crate::pose_graph::{apply_corrections, build_correspondence_set, optimize, CorrespondenceSet, PgoReport, PoseGraph};
use crate::registration::{compute_loop_constraint, prefilter_loop_edges, LoopConstraint, LoopRegistrationParams};
use crate::sensor::Frame;
use crate::submap::{add_points, create_submap, fuse_features, GlobalMap, Submap};
use crate::tracking::{constant_velocity, should_trigger_keyframe, track_frame, TrackingLog};

/// Entries of the event log, serialized one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SubmapStarted {
        submap: usize,
        keyframe: u64,
        copied_points: usize,
    },
    TrackingLost {
        frame: u64,
        reason: String,
    },
    SubmapCompleted {
        submap: usize,
        frames: usize,
        points: usize,
        surface_points: usize,
    },
    DegenerateSurface {
        submap: usize,
        reason: String,
    },
    LoopCandidates {
        submap: usize,
        s_min: f64,
        candidates: Vec<(usize, f64)>,
    },
    NoLoop {
        submap: usize,
    },
    LoopConstraint {
        source: usize,
        target: usize,
        fitness: f64,
        inlier_rmse: f64,
        translation: f64,
        accepted: bool,
    },
    LoopEdgeAdded {
        source: usize,
        target: usize,
        fitness: f64,
        correspondences: usize,
        kappa: f64,
        injected: bool,
    },
    Pgo {
        submap: usize,
        objective_before: f64,
        objective_after: f64,
        stage1_iterations: usize,
        stage2_iterations: usize,
        pruned: Vec<(usize, usize)>,
        diverged: bool,
    },
}

/// Line-process weight of one loop edge after a first stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EdgeWeight {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
    pub injected: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgoRecord {
    /// Submap whose completion triggered the optimization.
    pub submap: usize,
    pub report: PgoReport,
    pub weights: Vec<EdgeWeight>,
}

/// Mutable pipeline state. The last submap is the active one.
#[derive(Clone, Debug)]
pub struct SlamState {
    pub submaps: Vec<Submap>,
    pub trajectory: Trajectory,
    pub graph: PoseGraph,
    pub database: KeyframeDatabase,
    pub events: Vec<Event>,
    pub tracking_log: TrackingLog,
    pub pgo_records: Vec<PgoRecord>,
    /// `(source, target)` of every loop edge in graph order, and whether it
    /// was injected.
    pub loop_edges: Vec<(usize, usize, bool)>,
    /// Descriptions of the active submap's frames; the first is its keyframe.
    active_vectors: Vec<BowVector>,
    genuine_loops: usize,
    injected_loops: usize,
    outlier_rng: ChaCha8Rng,
}

impl SlamState {
    pub fn new(database: KeyframeDatabase, seed: u64) -> Self {
        Self {
            submaps: Vec::new(),
            trajectory: Trajectory::new(),
            graph: PoseGraph::new(),
            database,
            events: Vec::new(),
            tracking_log: TrackingLog::default(),
            pgo_records: Vec::new(),
            loop_edges: Vec::new(),
            active_vectors: Vec::new(),
            genuine_loops: 0,
            injected_loops: 0,
            outlier_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6f75_746c_6965_7273),
        }
    }

    pub fn active(&self) -> Option<&Submap> {
        self.submaps.last()
    }

    pub fn pgo_count(&self) -> usize {
        self.pgo_records.len()
    }
}

#[derive(Clone, Debug)]
pub struct SlamResult {
    pub trajectory: Trajectory,
    pub global_map: GlobalMap,
    /// Fused submap surfaces after all corrections.
    pub surface: PointCloud,
    pub metrics: RunMetrics,
    pub state: SlamState,
}

fn frame_pose(submap: &Submap, frame_id: u64) -> Pose {
    submap
        .frames
        .iter()
        .find(|(id, _)| *id == frame_id)
        .map(|(_, p)| *p)
        .expect("local keyframes belong to their submap")
}

/// Points fixed to a keyframe, used when adjacent surfaces do not overlap.
fn anchor_points(keyframe: &Pose) -> Vec<Vector3<f64>> {
    [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()]
        .iter()
        .map(|v| keyframe.transform_point(v))
        .collect()
}

fn random_outlier(rng: &mut ChaCha8Rng, o: &OutlierInjection) -> Pose {
    let unit = |rng: &mut ChaCha8Rng| loop {
        let v = Vector3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    };
    let axis = unit(rng);
    let angle = rng.random_range(o.min_rotation_deg..=o.max_rotation_deg).to_radians();
    let dir = unit(rng);
    let r = o.max_translation * rng.random::<f64>().cbrt();
    Pose::from_axis_angle(&axis, angle, dir * r)
}

struct Engine<'a> {
    config: &'a PipelineConfig,
    seq: &'a Sequence,
    state: SlamState,
}

impl<'a> Engine<'a> {
    fn frame_index(&self, id: u64) -> usize {
        id as usize
    }

    fn start_submap(&mut self, frame: &Frame, pose: Pose) {
        let id = self.state.submaps.len();
        let keyframe = Frame { pose, ..frame.clone() };
        let submap = create_submap(id, &keyframe, self.state.submaps.last(), self.config.density);
        self.state.events.push(Event::SubmapStarted {
            submap: id,
            keyframe: frame.id,
            copied_points: submap.len(),
        });
        self.state.submaps.push(submap);
        self.state.active_vectors.clear();
    }

    /// Adds the frame at `pose` to the active submap, maps it on the mapping
    /// stride and records its description.
    fn record_frame(&mut self, frame: &Frame, pose: Pose, lost: bool) -> Result<()> {
        self.state.trajectory.push(frame.id, frame.timestamp, pose)?;
        let config = self.config;
        let submap = self.state.submaps.last_mut().expect("an active submap exists");
        let local = submap.frames.len();
        submap.frames.push((frame.id, pose));
        if !lost && local % config.map_every == 0 {
            add_points(submap, frame, &pose, config.mapping_samples, config.seed ^ frame.id.wrapping_mul(0x2545_F491_4F6C_DD1D));
            submap.local_keyframes.push(frame.id);
        }
        let description = self.state.database.vocabulary().describe(&frame.gray);
        self.state.active_vectors.push(description.vector);
        Ok(())
    }

    fn fusion_params(&self, submap: usize) -> FusionParams {
        FusionParams {
            seed: self.config.fusion.seed ^ self.config.seed ^ submap as u64,
            ..self.config.fusion.clone()
        }
    }

    /// Completes the active submap and returns the correction applied to it.
    fn complete_active(&mut self) -> Result<Pose> {
        let s = self.state.submaps.len() - 1;
        let started = Instant::now();
        let surface = {
            let sub = &self.state.submaps[s];
            let frames: Vec<_> = sub
                .local_keyframes
                .iter()
                .map(|id| (&self.seq.frames[self.frame_index(*id)].depth, frame_pose(sub, *id)))
                .collect();
            if frames.is_empty() {
                Err(SlamError::Degenerate("no mapped frames".into()))
            } else {
                fuse_submap_surface(&frames, &self.seq.intrinsics, &self.fusion_params(s))
            }
        };
        log::debug!("submap {s}: surface fused in {:.2} s", started.elapsed().as_secs_f64());
        let degenerate = match surface {
            Ok(cloud) => {
                self.state.submaps[s].surface = Some(cloud);
                None
            }
            Err(e) => {
                log::warn!("submap {s}: {e}");
                Some(e.to_string())
            }
        };
        let sub = &self.state.submaps[s];
        self.state.events.push(Event::SubmapCompleted {
            submap: s,
            frames: sub.frames.len(),
            points: sub.len(),
            surface_points: sub.surface.as_ref().map_or(0, |c| c.len()),
        });
        self.add_graph_node(s)?;

        let keyframe_vector = self.state.active_vectors[0].clone();
        let mut correction = Pose::identity();
        if let Some(reason) = degenerate {
            self.state.events.push(Event::DegenerateSurface { submap: s, reason });
        } else if self.config.loops.enabled {
            let started = Instant::now();
            let added = self.detect_loops(s, &keyframe_vector)?;
            log::debug!("submap {s}: loop detection in {:.2} s", started.elapsed().as_secs_f64());
            if added > 0 {
                let started = Instant::now();
                correction = self.optimize_graph(s)?;
                log::debug!("submap {s}: PGO in {:.2} s", started.elapsed().as_secs_f64());
            }
        }
        let keyframe_id = self.state.submaps[s].keyframe_id;
        self.state.database.add(keyframe_id, s, keyframe_vector);
        Ok(correction)
    }

    fn add_graph_node(&mut self, s: usize) -> Result<()> {
        let node = self.state.graph.add_node();
        debug_assert_eq!(node, s);
        if s == 0 {
            return Ok(());
        }
        let eps = self.config.pgo.epsilon;
        let (prev, cur) = (&self.state.submaps[s - 1], &self.state.submaps[s]);
        let (corr, kappa) = match (&prev.surface, &cur.surface) {
            (Some(a), Some(b)) => {
                let fwd = build_correspondence_set(a, b, &Pose::identity(), eps)?;
                let back = build_correspondence_set(b, a, &Pose::identity(), eps)?;
                let kappa = (fwd.len() + back.len()) as f64 / 2.0;
                (fwd, kappa)
            }
            _ => (CorrespondenceSet::default(), 0.0),
        };
        let corr = if corr.len() < crate::pose_graph::MIN_CORRESPONDENCES {
            CorrespondenceSet::identity(&anchor_points(&cur.keyframe_pose))
        } else {
            corr
        };
        self.state.graph.add_odometry_edge(s - 1, corr, kappa)
    }

    fn registration_params(&self, s: usize, t: usize) -> LoopRegistrationParams {
        let mut p = self.config.registration.clone();
        p.ransac.seed ^= self.config.seed ^ ((s as u64) << 32 | t as u64);
        p
    }

    fn add_loop_edge(&mut self, s: usize, t: usize, x: Pose, fitness: f64, injected: bool) -> Result<()> {
        let eps = self.config.pgo.epsilon;
        let (src, tgt) = (
            self.state.submaps[s].surface.as_ref().expect("completed surface"),
            self.state.submaps[t].surface.as_ref().expect("completed surface"),
        );
        let fwd = build_correspondence_set(src, tgt, &x, eps)?;
        let back = build_correspondence_set(tgt, src, &x.inverse(), eps)?;
        let kappa = (fwd.len() + back.len()) as f64 / 2.0;
        self.state.events.push(Event::LoopEdgeAdded {
            source: s,
            target: t,
            fitness,
            correspondences: fwd.len(),
            kappa,
            injected,
        });
        self.state.graph.add_loop_edge(s, t, x, fitness, fwd, kappa)?;
        self.state.loop_edges.push((s, t, injected));
        Ok(())
    }

    /// Queries, registers and filters loop candidates of submap `s`; returns
    /// the number of loop edges added.
    fn detect_loops(&mut self, s: usize, keyframe_vector: &BowVector) -> Result<usize> {
        let lp = &self.config.loops;
        let frames = &self.state.active_vectors[1..];
        if frames.is_empty() || self.state.database.is_empty() {
            self.state.events.push(Event::NoLoop { submap: s });
            return Ok(0);
        }
        let s_min = dynamic_threshold(keyframe_vector, frames)?;
        let scored: Vec<(usize, f64)> = self
            .state
            .database
            .query(keyframe_vector, s, lp.top_k, s_min, lp.min_loop_distance)
            .into_iter()
            .filter(|c| self.state.submaps[c.submap_id].surface.is_some())
            .map(|c| (c.submap_id, c.score))
            .collect();
        log::debug!("submap {s}: s_min {s_min:.3}, candidates {scored:?}");
        let candidates: Vec<usize> = scored.iter().map(|c| c.0).collect();
        self.state.events.push(Event::LoopCandidates {
            submap: s,
            s_min,
            candidates: scored,
        });
        if candidates.is_empty() {
            self.state.events.push(Event::NoLoop { submap: s });
            return Ok(0);
        }
        let source = self.state.submaps[s].surface.as_ref().expect("checked above");
        let constraints: Vec<LoopConstraint> = candidates
            .par_iter()
            .map(|&t| {
                let target = self.state.submaps[t].surface.as_ref().expect("filtered above");
                compute_loop_constraint(s, t, source, target, &self.registration_params(s, t))
            })
            .collect::<Result<_>>()?;
        let kept = if lp.prefilter {
            prefilter_loop_edges(constraints.clone(), lp.sigma_min, lp.f_min).0
        } else {
            constraints.iter().filter(|c| c.fitness > 0.0).cloned().collect()
        };
        for c in &constraints {
            let accepted = kept.iter().any(|k| k.target == c.target);
            self.state.events.push(Event::LoopConstraint {
                source: c.source,
                target: c.target,
                fitness: c.fitness,
                inlier_rmse: c.inlier_rmse,
                translation: c.translation_magnitude(),
                accepted,
            });
        }
        let mut added = 0;
        for c in kept {
            self.add_loop_edge(s, c.target, c.transform, c.fitness, false)?;
            self.state.genuine_loops += 1;
            added += 1;
        }
        added += self.inject_outliers(s)?;
        if added == 0 {
            self.state.events.push(Event::NoLoop { submap: s });
        }
        Ok(added)
    }

    fn inject_outliers(&mut self, s: usize) -> Result<usize> {
        let o = &self.config.outliers;
        let wanted = (o.ratio * self.state.genuine_loops as f64).ceil() as usize;
        let min_dist = self.config.loops.min_loop_distance;
        let mut added = 0;
        while self.state.injected_loops < wanted && s >= min_dist {
            let free: Vec<usize> = (0..=s - min_dist)
                .filter(|t| self.state.submaps[*t].surface.is_some())
                .filter(|t| !self.state.loop_edges.iter().any(|(a, b, _)| *a == s && b == t))
                .collect();
            if free.is_empty() {
                break;
            }
            let t = free[self.state.outlier_rng.random_range(0..free.len())];
            let x = random_outlier(&mut self.state.outlier_rng, o);
            self.add_loop_edge(s, t, x, 0.0, true)?;
            self.state.injected_loops += 1;
            added += 1;
        }
        Ok(added)
    }

    fn optimize_graph(&mut self, s: usize) -> Result<Pose> {
        let result = optimize(&self.state.graph, &self.config.pgo)?;
        let weights = self
            .state
            .loop_edges
            .iter()
            .zip(&result.weights)
            .map(|(&(source, target, injected), &weight)| EdgeWeight {
                source,
                target,
                weight,
                injected,
            })
            .collect();
        let r = &result.report;
        self.state.events.push(Event::Pgo {
            submap: s,
            objective_before: r.objective_before,
            objective_after: r.objective_after,
            stage1_iterations: r.stage1_trace.len(),
            stage2_iterations: r.stage2_trace.len(),
            pruned: r.pruned.clone(),
            diverged: r.diverged,
        });
        log::info!(
            "PGO after submap {s}: objective {:.4e} -> {:.4e}, {} pruned",
            r.objective_before,
            r.objective_after,
            r.pruned.len()
        );
        apply_corrections(&mut self.state.submaps, &mut self.state.trajectory, &result.corrections)?;
        self.state.graph.rebase(&result)?;
        let correction = result.corrections[s];
        self.state.pgo_records.push(PgoRecord {
            submap: s,
            report: result.report,
            weights,
        });
        Ok(correction)
    }
}

/// Runs the pipeline over a sequence. In backend mode the sequence must carry
/// odometry for every frame. `gt_surface`, when given, is used for the
/// reconstruction metrics.
pub fn run(config: &PipelineConfig, seq: &Sequence, gt_surface: Option<&PointCloud>) -> Result<SlamResult> {
    config.validate()?;
    if seq.frames.is_empty() {
        return Err(SlamError::InsufficientData("empty sequence".into()));
    }
    if seq.frames.iter().enumerate().any(|(i, f)| f.id != i as u64) {
        return Err(SlamError::InvalidInput("frame ids must equal their sequence positions".into()));
    }
    let odometry = match config.mode {
        Mode::Backend => {
            let odo = seq
                .odometry
                .as_ref()
                .ok_or_else(|| SlamError::InvalidInput("backend mode needs input poses".into()))?;
            let poses: Vec<Pose> = seq
                .frames
                .iter()
                .map(|f| {
                    odo.get(f.id)
                        .map(|e| e.pose)
                        .ok_or_else(|| SlamError::InvalidInput(format!("no input pose for frame {}", f.id)))
                })
                .collect::<Result<_>>()?;
            Some(poses)
        }
        Mode::Full => None,
    };

    let mut vocabulary = Vocabulary::new(config.seed);
    vocabulary.train_idf(seq.frames.iter().take(config.idf_training_frames).map(|f| &f.gray));
    let mut engine = Engine {
        config,
        seq,
        state: SlamState::new(KeyframeDatabase::new(vocabulary), config.seed),
    };

    let initial = odometry
        .as_ref()
        .map(|o| o[0])
        .or_else(|| seq.ground_truth.get(seq.frames[0].id).map(|e| e.pose))
        .unwrap_or_else(Pose::identity);
    // maps raw odometry into the corrected world frame
    let mut odometry_fix = Pose::identity();

    for (i, frame) in seq.frames.iter().enumerate() {
        let mut lost = false;
        let (mut pose, rmse, inliers) = if i == 0 {
            (initial, 0.0, 0)
        } else if let Some(odo) = &odometry {
            (odometry_fix.compose(&odo[i]), 0.0, 0)
        } else {
            let entries = engine.state.trajectory.entries();
            let last = entries[i - 1].pose;
            let init = if i >= 2 { constant_velocity(&entries[i - 2].pose, &last) } else { last };
            let active = engine.state.active().expect("an active submap exists");
            match track_frame(active, frame, &init, &config.tracker) {
                Ok((p, stats)) => (p, stats.rmse, stats.inliers),
                Err(e) => {
                    engine.state.events.push(Event::TrackingLost {
                        frame: frame.id,
                        reason: e.to_string(),
                    });
                    lost = true;
                    (init, f64::NAN, 0)
                }
            }
        };
        let triggered = i > 0 && should_trigger_keyframe(&pose, &engine.state.active().expect("active").keyframe_pose, &config.tracker);
        if i == 0 {
            engine.start_submap(frame, pose);
        } else if triggered {
            let correction = engine.complete_active()?;
            pose = correction.compose(&pose);
            odometry_fix = correction.compose(&odometry_fix);
            engine.start_submap(frame, pose);
        }
        engine.state.tracking_log.record(frame.id, rmse, inliers, triggered, lost);
        engine.record_frame(frame, pose, lost)?;
    }
    engine.complete_active()?;

    let state = engine.state;
    let global_map = fuse_features(&state.submaps)?;
    let mut surface = PointCloud::new(Vec::new());
    for s in &state.submaps {
        if let Some(c) = &s.surface {
            surface.extend(c);
        }
    }
    let metrics = compute_metrics(config, seq, &state, &surface, gt_surface)?;
    Ok(SlamResult {
        trajectory: state.trajectory.clone(),
        global_map,
        surface,
        metrics,
        state,
    })
}

fn compute_metrics(config: &PipelineConfig, seq: &Sequence, state: &SlamState, surface: &PointCloud, gt_surface: Option<&PointCloud>) -> Result<RunMetrics> {
    let ate = if seq.ground_truth.is_empty() {
        None
    } else {
        // a rigid alignment needs three poses
        let align = state.trajectory.len() >= 3;
        Some(ate_rmse(&state.trajectory, &seq.ground_truth, align)?)
    };
    let recon = match gt_surface {
        Some(gt) if !gt.is_empty() && !surface.is_empty() => {
            let predicted = voxel_downsample(surface, config.tau / 2.0)?;
            Some(f_score(&predicted, gt, config.tau, false)?)
        }
        _ => None,
    };
    Ok(RunMetrics {
        ate_rmse_m: ate,
        f_score: recon.map(|r| r.f1),
        precision: recon.map(|r| r.precision),
        recall: recon.map(|r| r.recall),
        n_submaps: state.submaps.len(),
        n_pgo: state.pgo_count(),
        n_loop_edges: state.graph.loop_edge_count(),
    })
}
