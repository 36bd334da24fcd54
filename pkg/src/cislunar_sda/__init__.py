"""Cislunar space-domain-awareness constellation design and analysis.

The subpackages layer bottom-up: ``cr3bp`` (dynamics and propagation),
``measurement`` (angles and visibility), ``ekf`` (tracking filter),
``tasking`` (observer schedules), ``catalog`` (orbits, slots, targets),
``harness`` (objective and validation statistics) and ``optimizer``
(placement search).
"""
__version__ = "0.1.0"

from ._accel import USE_NUMBA
from .catalog import (OrbitalSlot, OrbitRecord, Target, TargetSet, build_optimization_set,
                      filter_catalog, generate_slots, generate_transfers, load_catalog,
                      load_constellations, load_fixture, make_targets, sample_target_phase,
                      stratified_targets)
from .cr3bp import (DEFAULT_INTEGRATOR, EARTH_MOON, CanonicalConstants, IntegratorConfig, Trajectory,
                    eom, eom_jacobian, jacobi_constant, propagate, propagate_states,
                    propagate_to_plane_crossing, pseudo_potential)
from .ekf import (FilterState, NoiseModel, TrackResult, build_snc_q, correct, init_estimate, predict,
                  run_track)
from .harness import FamilyStats, Scenario, objective, rmse_position, rmse_vector, three_sigma_series, validate
from .measurement import (ARCSEC, PrimaryBody, RelativeGeometry, SensorSpec, exclusion_angles, measure,
                          measurement_jacobian, primary_bodies, relative_geometry, synthesize_measurement,
                          visibility)
from .optimizer import ConstellationGenome, GAConfig, exhaustive_search, optimize, repair
from .tasking import Procedure, TaskingSchedule, build_schedule, epochs
