//! 6D spatial vectors expressed in world coordinates about the world origin.
//!
//! Motion vectors are `(angular, linear)` where `linear` is the velocity of the
//! body point currently coinciding with the origin. Force vectors are
//! `(moment about origin, force)`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Motion {
    pub ang: Vector3<f64>,
    pub lin: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Force {
    pub ang: Vector3<f64>,
    pub lin: Vector3<f64>,
}

impl Motion {
    pub fn new(ang: Vector3<f64>, lin: Vector3<f64>) -> Self {
        Motion { ang, lin }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Unit twist of a revolute joint with `axis` through `point`.
    pub fn revolute(axis: Vector3<f64>, point: Vector3<f64>) -> Self {
        Motion { ang: axis, lin: point.cross(&axis) }
    }

    /// `self x m` for motion vectors.
    pub fn cross_motion(&self, m: &Motion) -> Motion {
        Motion {
            ang: self.ang.cross(&m.ang),
            lin: self.ang.cross(&m.lin) + self.lin.cross(&m.ang),
        }
    }

    /// `self x* f` for force vectors.
    pub fn cross_force(&self, f: &Force) -> Force {
        Force {
            ang: self.ang.cross(&f.ang) + self.lin.cross(&f.lin),
            lin: self.ang.cross(&f.lin),
        }
    }

    /// Power pairing `self . f`.
    pub fn dot(&self, f: &Force) -> f64 {
        self.ang.dot(&f.ang) + self.lin.dot(&f.lin)
    }

    /// Velocity of the body point located at `p`.
    pub fn point_velocity(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.lin + self.ang.cross(p)
    }
}

impl Add for Motion {
    type Output = Motion;
    fn add(self, o: Motion) -> Motion {
        Motion { ang: self.ang + o.ang, lin: self.lin + o.lin }
    }
}

impl Sub for Motion {
    type Output = Motion;
    fn sub(self, o: Motion) -> Motion {
        Motion { ang: self.ang - o.ang, lin: self.lin - o.lin }
    }
}

impl Mul<f64> for Motion {
    type Output = Motion;
    fn mul(self, s: f64) -> Motion {
        Motion { ang: self.ang * s, lin: self.lin * s }
    }
}

impl Add for Force {
    type Output = Force;
    fn add(self, o: Force) -> Force {
        Force { ang: self.ang + o.ang, lin: self.lin + o.lin }
    }
}

impl AddAssign for Force {
    fn add_assign(&mut self, o: Force) {
        self.ang += o.ang;
        self.lin += o.lin;
    }
}

impl Neg for Force {
    type Output = Force;
    fn neg(self) -> Force {
        Force { ang: -self.ang, lin: -self.lin }
    }
}

/// Rigid-body inertia about the world origin: mass, first mass moment
/// `h = m c` and rotational inertia about the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialInertia {
    pub mass: f64,
    pub h: Vector3<f64>,
    pub rot: Matrix3<f64>,
}

impl Default for SpatialInertia {
    fn default() -> Self {
        SpatialInertia { mass: 0.0, h: Vector3::zeros(), rot: Matrix3::zeros() }
    }
}

impl SpatialInertia {
    /// Body of mass `m` with centre of mass `com` and inertia `inertia_com`
    /// about it, all in world coordinates.
    pub fn from_com(m: f64, com: Vector3<f64>, inertia_com: Matrix3<f64>) -> Self {
        let shift = (com.dot(&com) * Matrix3::identity() - com * com.transpose()) * m;
        SpatialInertia { mass: m, h: com * m, rot: inertia_com + shift }
    }

    pub fn point_mass(m: f64, at: Vector3<f64>) -> Self {
        Self::from_com(m, at, Matrix3::zeros())
    }

    pub fn apply(&self, v: &Motion) -> Force {
        Force {
            ang: self.rot * v.ang + self.h.cross(&v.lin),
            lin: v.lin * self.mass - self.h.cross(&v.ang),
        }
    }

    pub fn com(&self) -> Vector3<f64> {
        self.h / self.mass
    }
}

impl Add for SpatialInertia {
    type Output = SpatialInertia;
    fn add(self, o: SpatialInertia) -> SpatialInertia {
        SpatialInertia { mass: self.mass + o.mass, h: self.h + o.h, rot: self.rot + o.rot }
    }
}

impl AddAssign for SpatialInertia {
    fn add_assign(&mut self, o: SpatialInertia) {
        self.mass += o.mass;
        self.h += o.h;
        self.rot += o.rot;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inertia_momentum_matches_point_mass() {
        let c = Vector3::new(0.3, -0.1, 0.2);
        let body = SpatialInertia::point_mass(2.0, c);
        let v = Motion::new(Vector3::new(0.1, 0.7, -0.4), Vector3::new(1.0, 0.5, 0.2));
        let f = body.apply(&v);
        let vc = v.point_velocity(&c);
        assert!((f.lin - vc * 2.0).norm() < 1e-14);
        assert!((f.ang - c.cross(&(vc * 2.0))).norm() < 1e-14);
        // Kinetic energy from the pairing equals 1/2 m |v_c|^2.
        assert!((0.5 * v.dot(&f) - vc.norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn revolute_twist_fixes_axis_point() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let s = Motion::revolute(Vector3::y(), p);
        assert!(s.point_velocity(&p).norm() < 1e-15);
    }
}
