//! Toy tabletop manipulation environments rendered through a parametric
//! depth camera. Each environment produces, per step, a partial point cloud
//! and a low-resolution RGB-D image of the same underlying scene, so the
//! point-cloud and RGB-D agents observe identical conditions.

mod render;

pub use render::{fibonacci_sphere, render_points, shade, Lighting, RgbdImage};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::{
    backproject, farthest_point_sample_indices, gather, prune, CameraModel, PointCloud, Vec3,
    WorkspaceBox,
};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    LiftCube,
    ClutterLift,
    StackCube,
}

impl Task {
    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "lift_cube" => Some(Task::LiftCube),
            "clutter_lift" => Some(Task::ClutterLift),
            "stack_cube" => Some(Task::StackCube),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::LiftCube => "lift_cube",
            Task::ClutterLift => "clutter_lift",
            Task::StackCube => "stack_cube",
        }
    }

    pub fn default_distractors(&self) -> usize {
        match self {
            Task::ClutterLift => 3,
            _ => 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("step called after episode end")]
    EpisodeOver,
}

/// Camera / lighting / distractor knobs. Defaults reproduce the training
/// condition exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub pitch: f64,
    pub yaw: f64,
    pub fov: f64,
    pub ambient: f64,
    pub spotlight: bool,
    /// `None` keeps the task default.
    pub distractors: Option<usize>,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            pitch: 0.0,
            yaw: 0.0,
            fov: std::f64::consts::FRAC_PI_2,
            ambient: 1.0,
            spotlight: false,
            distractors: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub center: Vec3,
    pub half_extent: f64,
    pub color: Vec3,
    pub grasped: bool,
}

/// Full simulator state; not visible to the agent.
#[derive(Clone, Debug)]
pub struct Scene {
    pub gripper: Vec3,
    /// 0 = closed, 1 = open.
    pub aperture: f64,
    pub objects: Vec<SceneObject>,
    pub goal: Vec3,
    pub table_height: f64,
}

/// One agent-visible step result.
#[derive(Clone, Debug)]
pub struct Observation {
    pub cloud: PointCloud,
    pub image: RgbdImage,
    pub reward: f64,
    /// 1 while the episode continues, 0 at the terminal step.
    pub continuation: u8,
}

/// Environment constants: action box, spawn distribution, camera defaults,
/// and the observation budget.
#[derive(Clone, Debug)]
pub struct EnvConfig {
    pub image_size: usize,
    pub n_points: usize,
    pub episode_len: usize,
    pub action_dim: usize,
    pub discount: f64,
    pub spawn_range: f64,
    pub grasp_radius: f64,
    pub success_radius: f64,
    pub aperture_grasp_max: f64,
    pub table_height: f64,
    pub cube_half: f64,
    pub goal: Vec3,
    pub camera_distance: f64,
    pub base_pitch: f64,
    pub base_yaw: f64,
    pub max_pos_delta: f64,
    pub max_aperture_delta: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            image_size: 32,
            n_points: 256,
            episode_len: 200,
            action_dim: 4,
            discount: 0.997,
            spawn_range: 0.08,
            grasp_radius: 0.02,
            success_radius: 0.02,
            aperture_grasp_max: 0.3,
            table_height: 0.0,
            cube_half: 0.02,
            goal: [0.0, 0.0, 0.16],
            camera_distance: 0.5,
            base_pitch: -0.6,
            base_yaw: 0.0,
            max_pos_delta: 0.05,
            max_aperture_delta: 0.2,
        }
    }
}

impl EnvConfig {
    /// Per-dimension half-width of the action box: xyz deltas then aperture
    /// delta.
    pub fn action_scale(&self) -> Vec<f64> {
        vec![
            self.max_pos_delta,
            self.max_pos_delta,
            self.max_pos_delta,
            self.max_aperture_delta,
        ]
    }

    pub fn workspace(&self) -> WorkspaceBox {
        let t = self.table_height;
        WorkspaceBox::new([-0.28, -0.28, t + 0.004], [0.28, 0.28, t + 0.5])
    }

    pub fn table_center(&self) -> Vec3 {
        [0.0, 0.0, self.table_height]
    }

    /// Camera pose for a perturbation: the default orbit pose with pitch and
    /// yaw offsets applied about the table center, so a pure yaw offset
    /// changes the rotation by exactly R_z(offset).
    pub fn camera_for(&self, p: &PerturbationSpec) -> CameraModel {
        let pitch = self.base_pitch + p.pitch;
        let yaw = self.base_yaw + p.yaw;
        let elev = -pitch;
        let tc = self.table_center();
        let r = self.camera_distance;
        let pos = [
            tc[0] - r * elev.cos() * yaw.cos(),
            tc[1] - r * elev.cos() * yaw.sin(),
            tc[2] + r * elev.sin(),
        ];
        CameraModel::look_at(p.fov, self.image_size, self.image_size, pos, tc, [0.0, 0.0, 1.0])
    }
}

const TARGET_COLOR: Vec3 = [0.9, 0.12, 0.1];
const DISTRACTOR_COLOR: Vec3 = [0.5, 0.5, 0.5];
const BASE_CUBE_COLOR: Vec3 = [0.85, 0.8, 0.15];
const TABLE_COLOR: Vec3 = [0.75, 0.75, 0.78];
const GOAL_COLOR: Vec3 = [0.1, 0.9, 0.15];
const GRIPPER_COLOR: Vec3 = [0.2, 0.35, 0.95];

const GRIPPER_SPAWN_Z: f64 = 0.12;
const FACE_GRID: usize = 8;

/// Toy manipulation environment. Deterministic given (seed, perturbation,
/// action sequence).
pub struct Env {
    pub task: Task,
    pub cfg: EnvConfig,
    pub scene: Scene,
    pub camera: CameraModel,
    pub lighting: Lighting,
    step_count: usize,
    done: bool,
    rng_env: ChaCha8Rng,
    rng_fps: ChaCha8Rng,
    // surface sample offsets, fixed per reset
    object_samples: Vec<Vec<Vec3>>,
    table_points: Vec<Vec3>,
    goal_marker: Vec<Vec3>,
    finger_block: Vec<Vec3>,
}

impl Env {
    pub fn new(task: Task, cfg: EnvConfig, seed: u64, perturbation: &PerturbationSpec) -> Self {
        let mut env = Env {
            task,
            cfg,
            scene: Scene {
                gripper: [0.0; 3],
                aperture: 1.0,
                objects: Vec::new(),
                goal: [0.0; 3],
                table_height: 0.0,
            },
            camera: CameraModel::look_at(1.0, 2, 2, [1.0, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0]),
            lighting: Lighting::default(),
            step_count: 0,
            done: false,
            rng_env: substream(seed, "env"),
            rng_fps: substream(seed, "fps"),
            object_samples: Vec::new(),
            table_points: Vec::new(),
            goal_marker: Vec::new(),
            finger_block: Vec::new(),
        };
        env.reset(seed, perturbation);
        env
    }

    /// Sample a fresh initial scene and configure the camera/lighting per
    /// the perturbation. Deterministic for a fixed seed.
    pub fn reset(&mut self, seed: u64, perturbation: &PerturbationSpec) -> Observation {
        self.rng_env = substream(seed, "env");
        self.rng_fps = substream(seed, "fps");
        self.camera = self.cfg.camera_for(perturbation);
        self.lighting = Lighting {
            ambient: perturbation.ambient,
            spotlight: perturbation.spotlight,
        };
        self.step_count = 0;
        self.done = false;

        let half = self.cfg.cube_half;
        let table = self.cfg.table_height;
        let mut objects = Vec::new();
        let target = SceneObject {
            center: self.spawn_on_table(&[]),
            half_extent: half,
            color: TARGET_COLOR,
            grasped: false,
        };
        objects.push(target);
        if self.task == Task::StackCube {
            let taken = [objects[0].center];
            objects.push(SceneObject {
                center: self.spawn_on_table(&taken),
                half_extent: half,
                color: BASE_CUBE_COLOR,
                grasped: false,
            });
        }
        let distractors = perturbation
            .distractors
            .unwrap_or_else(|| self.task.default_distractors());
        for _ in 0..distractors {
            let taken: Vec<Vec3> = objects.iter().map(|o| o.center).collect();
            objects.push(SceneObject {
                center: self.spawn_on_table(&taken),
                half_extent: half,
                color: DISTRACTOR_COLOR,
                grasped: false,
            });
        }

        self.scene = Scene {
            gripper: [0.0, 0.0, table + GRIPPER_SPAWN_Z],
            aperture: 1.0,
            objects,
            goal: self.cfg.goal,
            table_height: table,
        };

        // fixed-per-seed surface sampling
        self.object_samples = (0..self.scene.objects.len())
            .map(|_| self.cube_samples(half))
            .collect();
        self.table_points = table_grid(table);
        self.goal_marker = fibonacci_sphere(36, 0.012);
        self.finger_block = finger_grid();

        let reward = reward(&self.scene, self.task, &self.cfg);
        self.make_observation(reward, 1)
    }

    fn spawn_on_table(&mut self, taken: &[Vec3]) -> Vec3 {
        let half = self.cfg.cube_half;
        let range = self.cfg.spawn_range;
        let z = self.cfg.table_height + half;
        for _ in 0..64 {
            let p = [
                self.rng_env.gen_range(-range..range),
                self.rng_env.gen_range(-range..range),
                z,
            ];
            if taken
                .iter()
                .all(|t| ((t[0] - p[0]).powi(2) + (t[1] - p[1]).powi(2)).sqrt() > 3.0 * half)
            {
                return p;
            }
        }
        [0.0, 0.0, z]
    }

    fn cube_samples(&mut self, half: f64) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(6 * FACE_GRID * FACE_GRID);
        let cell = 2.0 * half / FACE_GRID as f64;
        for face in 0..6 {
            let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
            for i in 0..FACE_GRID {
                for j in 0..FACE_GRID {
                    let ji = self.rng_env.gen_range(-0.4..0.4) * cell;
                    let jj = self.rng_env.gen_range(-0.4..0.4) * cell;
                    let a = -half + (i as f64 + 0.5) * cell + ji;
                    let b = -half + (j as f64 + 0.5) * cell + jj;
                    let mut p = [0.0; 3];
                    p[axis] = sign * half;
                    p[(axis + 1) % 3] = a.clamp(-half, half);
                    p[(axis + 2) % 3] = b.clamp(-half, half);
                    out.push(p);
                }
            }
        }
        out
    }

    /// All shaded world-frame surface points of the current scene.
    pub fn surface_points(&self) -> Vec<(Vec3, Vec3)> {
        let mut pts = Vec::with_capacity(
            self.table_points.len()
                + self.scene.objects.len() * self.object_samples[0].len()
                + self.goal_marker.len()
                + 2 * self.finger_block.len(),
        );
        for p in &self.table_points {
            pts.push((*p, TABLE_COLOR));
        }
        for (obj, samples) in self.scene.objects.iter().zip(&self.object_samples) {
            for s in samples {
                pts.push((
                    [obj.center[0] + s[0], obj.center[1] + s[1], obj.center[2] + s[2]],
                    obj.color,
                ));
            }
        }
        for s in &self.goal_marker {
            pts.push((
                [
                    self.scene.goal[0] + s[0],
                    self.scene.goal[1] + s[1],
                    self.scene.goal[2] + s[2],
                ],
                GOAL_COLOR,
            ));
        }
        // two finger clusters; separation tracks the aperture so the gripper
        // state is observable
        let sep = 0.012 + 0.05 * self.scene.aperture;
        for side in [-1.0, 1.0] {
            let base = [
                self.scene.gripper[0] + side * sep / 2.0,
                self.scene.gripper[1],
                self.scene.gripper[2],
            ];
            for s in &self.finger_block {
                pts.push(([base[0] + s[0], base[1] + s[1], base[2] + s[2]], GRIPPER_COLOR));
            }
        }
        pts
    }

    /// Rasterize the current scene through the configured camera.
    pub fn render(&self) -> RgbdImage {
        render_points(
            &self.surface_points(),
            &self.camera,
            &self.lighting,
            self.cfg.table_center(),
        )
    }

    /// Full observation pipeline: render, back-project, prune to the
    /// workspace, farthest-point-sample to the point budget (padding by
    /// repetition when fewer survive).
    fn make_observation(&mut self, reward: f64, continuation: u8) -> Observation {
        let image = self.render();
        let cloud = backproject(&image.depth, &image.rgb, &self.camera)
            .expect("camera validated at construction");
        let pruned = prune(&cloud, &self.cfg.workspace());
        let n = self.cfg.n_points;
        let cloud = if pruned.is_empty() {
            // degenerate frame: pad with a single dark origin point
            PointCloud::new(vec![[0.0; 3]; n], vec![[0.0; 3]; n]).unwrap()
        } else {
            let seed = self.rng_fps.gen_range(0..pruned.len());
            let idx = farthest_point_sample_indices(&pruned.positions, n.min(pruned.len()), seed)
                .expect("non-empty cloud");
            let mut padded = Vec::with_capacity(n);
            for i in 0..n {
                padded.push(idx[i % idx.len()]);
            }
            gather(&pruned, &padded)
        };
        debug_assert_eq!(cloud.len(), n);
        Observation {
            cloud,
            image,
            reward,
            continuation,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step_count
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn success(&self) -> bool {
        task_success(&self.scene, self.task, &self.cfg)
    }

    /// Advance the scene by one clamped action
    /// [dx, dy, dz, d_aperture]. Kinematic gripper, proximity grasping, and
    /// the staged task reward.
    pub fn step(&mut self, action: &[f64]) -> Result<Observation, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        assert_eq!(action.len(), self.cfg.action_dim, "action dimension");
        let dp = self.cfg.max_pos_delta;
        let da = self.cfg.max_aperture_delta;
        let d = [
            action[0].clamp(-dp, dp),
            action[1].clamp(-dp, dp),
            action[2].clamp(-dp, dp),
            action[3].clamp(-da, da),
        ];
        let t = self.cfg.table_height;
        self.scene.gripper = [
            (self.scene.gripper[0] + d[0]).clamp(-0.22, 0.22),
            (self.scene.gripper[1] + d[1]).clamp(-0.22, 0.22),
            (self.scene.gripper[2] + d[2]).clamp(t + 0.02, t + 0.3),
        ];
        self.scene.aperture = (self.scene.aperture + d[3]).clamp(0.0, 1.0);

        let grasped_idx = self.scene.objects.iter().position(|o| o.grasped);
        match grasped_idx {
            Some(i) => {
                if self.scene.aperture >= self.cfg.aperture_grasp_max {
                    // release: the cube drops back onto the table
                    self.scene.objects[i].grasped = false;
                    let half = self.scene.objects[i].half_extent;
                    self.scene.objects[i].center[2] = t + half;
                } else {
                    self.scene.objects[i].center = self.scene.gripper;
                }
            }
            None => {
                if self.scene.aperture < self.cfg.aperture_grasp_max {
                    // nearest cube within reach becomes grasped
                    let g = self.scene.gripper;
                    let mut best: Option<(usize, f64)> = None;
                    for (i, o) in self.scene.objects.iter().enumerate() {
                        let d2 = (o.center[0] - g[0]).powi(2)
                            + (o.center[1] - g[1]).powi(2)
                            + (o.center[2] - g[2]).powi(2);
                        if d2.sqrt() < self.cfg.grasp_radius
                            && best.map(|(_, bd)| d2 < bd).unwrap_or(true)
                        {
                            best = Some((i, d2));
                        }
                    }
                    if let Some((i, _)) = best {
                        self.scene.objects[i].grasped = true;
                        self.scene.objects[i].center = self.scene.gripper;
                    }
                }
            }
        }

        self.step_count += 1;
        let r = reward(&self.scene, self.task, &self.cfg);
        let success = task_success(&self.scene, self.task, &self.cfg);
        let continuation = if success || self.step_count >= self.cfg.episode_len {
            0
        } else {
            1
        };
        self.done = continuation == 0;
        Ok(self.make_observation(r, continuation))
    }
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Index of the task-relevant cube (the unique red one).
fn target_index(scene: &Scene) -> usize {
    scene
        .objects
        .iter()
        .position(|o| o.color == TARGET_COLOR)
        .expect("scene must contain the target cube")
}

/// Where the target cube should end up.
fn task_goal(scene: &Scene, task: Task) -> Vec3 {
    match task {
        Task::LiftCube | Task::ClutterLift => scene.goal,
        Task::StackCube => {
            // top-center of the base cube
            let ti = target_index(scene);
            let base = scene
                .objects
                .iter()
                .enumerate()
                .find(|(i, o)| *i != ti && o.color == BASE_CUBE_COLOR)
                .map(|(_, o)| o)
                .expect("stack task needs a base cube");
            [
                base.center[0],
                base.center[1],
                base.center[2] + base.half_extent + scene.objects[ti].half_extent,
            ]
        }
    }
}

pub fn task_success(scene: &Scene, task: Task, cfg: &EnvConfig) -> bool {
    let ti = target_index(scene);
    let cube = &scene.objects[ti];
    let goal = task_goal(scene, task);
    match task {
        Task::LiftCube | Task::ClutterLift => {
            cube.grasped && dist(cube.center, goal) < cfg.success_radius
        }
        Task::StackCube => dist(cube.center, goal) < cfg.success_radius,
    }
}

/// Dense staged shaping:
/// r = −‖gripper − cube‖ + [grasped]·(1 − ‖cube − goal‖) + 5·[success].
pub fn reward(scene: &Scene, task: Task, cfg: &EnvConfig) -> f64 {
    let ti = target_index(scene);
    let cube = &scene.objects[ti];
    let goal = task_goal(scene, task);
    let mut r = -dist(scene.gripper, cube.center);
    if cube.grasped {
        r += 1.0 - dist(cube.center, goal);
    }
    if task_success(scene, task, cfg) {
        r += 5.0;
    }
    r
}

fn table_grid(table_z: f64) -> Vec<Vec3> {
    let mut pts = Vec::new();
    let n = 29;
    let spacing = 0.02;
    for i in 0..n {
        for j in 0..n {
            pts.push([
                (i as f64 - (n - 1) as f64 / 2.0) * spacing,
                (j as f64 - (n - 1) as f64 / 2.0) * spacing,
                table_z,
            ]);
        }
    }
    pts
}

fn finger_grid() -> Vec<Vec3> {
    let mut pts = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..4 {
                pts.push([
                    (i as f64 - 1.0) * 0.005,
                    (j as f64 - 1.0) * 0.005,
                    (k as f64 - 1.5) * 0.006,
                ]);
            }
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Mat3;

    fn mk(task: Task) -> Env {
        Env::new(task, EnvConfig::default(), 7, &PerturbationSpec::default())
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = mk(Task::LiftCube);
        let mut b = mk(Task::LiftCube);
        let oa = a.reset(123, &PerturbationSpec::default());
        let ob = b.reset(123, &PerturbationSpec::default());
        assert_eq!(oa.cloud, ob.cloud);
        assert_eq!(oa.image, ob.image);
        assert_eq!(oa.reward, ob.reward);
    }

    #[test]
    fn yaw_offset_rotates_camera_by_exactly_rz() {
        let cfg = EnvConfig::default();
        let base = cfg.camera_for(&PerturbationSpec::default());
        let pert = cfg.camera_for(&PerturbationSpec {
            yaw: 0.2,
            ..Default::default()
        });
        let rel = pert.rot.mul_mat(&base.rot.transpose());
        let want = Mat3::rot_z(0.2);
        for i in 0..3 {
            for j in 0..3 {
                assert!((rel.0[i][j] - want.0[i][j]).abs() < 1e-9, "{i},{j}");
            }
        }
    }

    #[test]
    fn pitch_offset_rotates_camera_by_expected_angle() {
        let cfg = EnvConfig::default();
        let base = cfg.camera_for(&PerturbationSpec::default());
        let pert = cfg.camera_for(&PerturbationSpec {
            pitch: 0.15,
            ..Default::default()
        });
        let rel = pert.rot.mul_mat(&base.rot.transpose());
        assert!((rel.angle() - 0.15).abs() < 1e-9);
    }

    #[test]
    fn clutter_has_exactly_one_target_plus_distractors() {
        let env = Env::new(
            Task::ClutterLift,
            EnvConfig::default(),
            3,
            &PerturbationSpec {
                distractors: Some(3),
                ..Default::default()
            },
        );
        let reds = env
            .scene
            .objects
            .iter()
            .filter(|o| o.color == TARGET_COLOR)
            .count();
        assert_eq!(reds, 1);
        assert_eq!(env.scene.objects.len(), 4);
    }

    #[test]
    fn zero_action_keeps_state_and_reward() {
        let mut env = mk(Task::LiftCube);
        let before = env.scene.clone();
        let r_before = reward(&env.scene, env.task, &env.cfg);
        let obs = env.step(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(env.scene.gripper, before.gripper);
        assert_eq!(env.scene.aperture, before.aperture);
        assert_eq!(obs.reward, r_before);
    }

    #[test]
    fn grasp_when_close_and_closed() {
        let mut env = mk(Task::LiftCube);
        let cube = env.scene.objects[0].center;
        env.scene.gripper = cube;
        env.scene.aperture = 0.0;
        env.step(&[0.0; 4]).unwrap();
        assert!(env.scene.objects[0].grasped);
        // grasped cube tracks the gripper
        env.step(&[0.03, 0.0, 0.02, 0.0]).unwrap();
        assert_eq!(env.scene.objects[0].center, env.scene.gripper);
    }

    #[test]
    fn scripted_approach_rewards_match_formula_oracle() {
        let mut env = mk(Task::LiftCube);
        let actions = [
            [0.02, -0.01, -0.03, -0.1],
            [0.05, 0.02, -0.05, -0.2],
            [-0.01, 0.04, 0.01, 0.15],
        ];
        for a in &actions {
            let obs = env.step(a).unwrap();
            // independent re-evaluation of the shaping formula
            let cube = &env.scene.objects[0];
            let mut want = -dist(env.scene.gripper, cube.center);
            if cube.grasped {
                want += 1.0 - dist(cube.center, env.scene.goal);
            }
            if cube.grasped && dist(cube.center, env.scene.goal) < env.cfg.success_radius {
                want += 5.0;
            }
            assert!((obs.reward - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grasped_at_goal_scores_about_six_and_ends_episode() {
        let mut env = mk(Task::LiftCube);
        env.scene.objects[0].grasped = true;
        env.scene.objects[0].center = env.scene.goal;
        env.scene.gripper = env.scene.goal;
        env.scene.aperture = 0.0;
        let r = reward(&env.scene, env.task, &env.cfg);
        assert!((r - 6.0).abs() < 1e-9);
        let obs = env.step(&[0.0; 4]).unwrap();
        assert_eq!(obs.continuation, 0);
        assert!(env.done());
        assert!(env.step(&[0.0; 4]).is_err());
    }

    #[test]
    fn episode_caps_at_200_steps() {
        let mut env = mk(Task::LiftCube);
        let mut last = 1;
        for _ in 0..200 {
            last = env.step(&[0.0, 0.0, 0.05, 0.0]).unwrap().continuation;
            if last == 0 {
                break;
            }
        }
        assert_eq!(last, 0);
        assert_eq!(env.steps_taken(), 200);
    }

    #[test]
    fn observation_has_exact_point_budget() {
        let mut cfg = EnvConfig::default();
        cfg.n_points = 2000; // force padding
        let env = Env::new(Task::LiftCube, cfg, 5, &PerturbationSpec::default());
        let mut env = env;
        let obs = env.reset(5, &PerturbationSpec::default());
        assert_eq!(obs.cloud.len(), 2000);
    }

    #[test]
    fn lighting_changes_colors_never_positions() {
        let mut env = mk(Task::LiftCube);
        let dark = env.reset(
            11,
            &PerturbationSpec {
                ambient: 0.15,
                spotlight: true,
                ..Default::default()
            },
        );
        let lit = env.reset(11, &PerturbationSpec::default());
        assert_eq!(dark.cloud.positions, lit.cloud.positions);
        assert_ne!(dark.cloud.colors, lit.cloud.colors);
    }

    #[test]
    fn fov_change_keeps_world_frame_geometry() {
        // The cloud is quantized on pixel rays, so individual points shift
        // by at most one pixel footprint when the FoV changes; there is no
        // systematic rescaling like in image space.
        let mut env = mk(Task::LiftCube);
        let wide = env.reset(21, &PerturbationSpec::default());
        let narrow = env.reset(
            21,
            &PerturbationSpec {
                fov: std::f64::consts::FRAC_PI_4,
                ..Default::default()
            },
        );
        // footprint bound at ~0.6m range for the wide camera
        let bound = 2.0 * 0.6 * (std::f64::consts::FRAC_PI_4).tan() / 32.0 * 2.0;
        let mut worst: f64 = 0.0;
        for p in narrow.cloud.positions.iter() {
            let nearest = wide
                .cloud
                .positions
                .iter()
                .map(|q| dist(*p, *q))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(nearest);
        }
        assert!(worst < bound, "worst displacement {worst} vs bound {bound}");
    }

    #[test]
    fn stack_cube_success_via_placement() {
        let mut env = mk(Task::StackCube);
        let ti = target_index(&env.scene);
        let goal = task_goal(&env.scene, Task::StackCube);
        env.scene.objects[ti].center = goal;
        assert!(task_success(&env.scene, Task::StackCube, &env.cfg));
    }
}
