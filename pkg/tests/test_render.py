import numpy as np
import pytest

from voltrace.fields import (
    HomogeneousBoxField,
    HomogeneousSphereField,
    LambertianShellField,
    ObjectInstance,
)
from voltrace.geom import Ray, RigidTransform, Rng, vec3
from voltrace.render import (
    Camera,
    EnvironmentMap,
    OracleSettings,
    PointLight,
    RenderMode,
    RenderSettings,
    RaySampleSet,
    Scene,
    direct_radiance,
    environment_radiance,
    indirect_radiance,
    march_object,
    rays_from_camera_matrix,
    render_image,
    render_ray,
    render_reference,
    shadow_transmittance,
)


def inst(field, pos=(0.0, 0.0, 0.0), scale=1.0):
    return ObjectInstance(field, RigidTransform(np.eye(3), np.asarray(pos, dtype=np.float64), scale))


Z = vec3(0, 0, 1)
WHITE = (1.0, 1.0, 1.0)

# shared three-object layout: shell ground, small shell, dense sphere
GROUND = inst(LambertianShellField(2.5, 0.08, 20.0, (0.75, 0.72, 0.65)), (0.0, -2.58, 0.0))
SHELL = inst(LambertianShellField(0.5, 0.08, 12.0, (0.25, 0.7, 0.3)), (-0.72, 0.42, 0.15))
SPHERE = inst(HomogeneousSphereField(0.28, 6.0, (0.8, 0.25, 0.2)), (0.62, 0.30, -0.05))
KEY_LIGHT = PointLight((1.5, 5.0, -2.5), WHITE)

SMALL_CAM = Camera(position=(0, 1.6, -4.0), look_at=(0, 0.05, 0), up=(0, 1, 0),
                   vertical_fov_deg=38, width=16, height=16)
SMALL_SETTINGS = dict(samples_per_object=64, shadow_samples=8, indirect_dirs=8, max_bounces=2)


def three_object_scene(order=(0, 1, 2)):
    objs = [GROUND, SHELL, SPHERE]
    return Scene(objects=[objs[i] for i in order], lights=[KEY_LIGHT])


@pytest.fixture(scope="module")
def mode_renders():
    scene = three_object_scene()
    out = {}
    for mode in RenderMode:
        st = RenderSettings(mode=mode, **SMALL_SETTINGS)
        out[mode] = render_image(scene, SMALL_CAM, st, seed=7)
    return out


# ---------------------------------------------------------------------------
# marching and compositing
# ---------------------------------------------------------------------------


def test_march_object_samples_stay_in_bins():
    obj = inst(HomogeneousSphereField(1.0, 2.0, WHITE))
    for seed in range(5):
        s = march_object(obj, Ray(vec3(0, 0, -3), Z), (2.0, 4.0), 32, Rng(seed))
        bins = np.floor((s.t - 2.0) / (2.0 / 32)).astype(int)
        assert np.array_equal(bins, np.arange(32))
        assert np.all(s.sigma >= 0.0)
        assert np.all((s.alpha >= 0.0) & (s.alpha <= 1.0))


def test_march_object_single_sample_covers_remainder():
    # one sample at t_s: its interval is the remainder t_far - t_s
    obj = inst(HomogeneousSphereField(1.0, 2.0, WHITE))
    rng = Rng(3)
    expected_t = 2.0 + Rng(3).uniforms(1)[0] * 2.0
    s = march_object(obj, Ray(vec3(0, 0, -3), Z), (2.0, 4.0), 1, rng)
    assert np.isclose(s.t[0], expected_t)
    assert np.isclose(s.alpha[0], 1.0 - np.exp(-2.0 * (4.0 - expected_t)))


def test_march_object_zero_density_keeps_zero_alpha():
    obj = inst(HomogeneousSphereField(0.5, 2.0, WHITE))
    s = march_object(obj, Ray(vec3(0, 0, -3), Z), (0.5, 5.5), 64, Rng(1))
    outside = np.linalg.norm(s.positions, axis=1) > 0.5
    assert np.all(s.alpha[outside] == 0.0)
    assert np.any(s.alpha > 0.0)


def test_march_object_rejects_empty_interval():
    obj = inst(HomogeneousSphereField(1.0, 1.0, WHITE))
    with pytest.raises(ValueError):
        march_object(obj, Ray(vec3(0, 0, -3), Z), (2.0, 2.0), 4, Rng(0))


def test_compositing_weights_plus_escape_is_one():
    obj_a = inst(HomogeneousSphereField(1.0, 3.0, WHITE))
    obj_b = inst(LambertianShellField(0.8, 0.2, 5.0, WHITE), (0.2, 0.0, 1.0))
    ray = Ray(vec3(0, 0, -4), Z)
    for seed in range(6):
        rng = Rng(seed)
        merged = RaySampleSet.merge([
            march_object(obj_a, ray, (3.0, 5.0), 48, rng.derive(0), object_index=0),
            march_object(obj_b, ray, (3.2, 5.8), 48, rng.derive(1), object_index=1),
        ])
        w = merged.compositing_weights()
        assert np.all((w >= 0.0) & (w <= 1.0))
        assert np.isclose(w.sum() + merged.transmittance(), 1.0, atol=1e-12)


def test_merge_sorts_by_distance():
    a = RaySampleSet(np.array([1.0, 3.0]), np.zeros((2, 3)), np.zeros(2), np.zeros(2),
                     np.zeros(2, dtype=np.int32))
    b = RaySampleSet(np.array([2.0, 4.0]), np.ones((2, 3)), np.ones(2), np.ones(2),
                     np.ones(2, dtype=np.int32))
    m = RaySampleSet.merge([a, b])
    assert np.array_equal(m.t, [1.0, 2.0, 3.0, 4.0])
    assert np.array_equal(m.object_index, [0, 1, 0, 1])
    empty = RaySampleSet.merge([])
    assert empty.t.shape == (0,) and empty.positions.shape == (0, 3)


# ---------------------------------------------------------------------------
# transmittance pins
# ---------------------------------------------------------------------------


def test_transmittance_homogeneous_sphere_matches_beer_lambert():
    # sigma=5 through a diameter-2 chord: tau = exp(-10); committed seed
    obj = inst(HomogeneousSphereField(1.0, 5.0, WHITE))
    s = march_object(obj, Ray(vec3(0, 0, -3), Z), (2.0, 4.0), 192, Rng(2))
    assert abs(s.transmittance() / np.exp(-10.0) - 1.0) < 0.02


def test_reference_transmittance_is_nearly_exact():
    # 1x1 render with white background and no lights reads out transmittance
    obj = inst(HomogeneousSphereField(1.0, 5.0, WHITE))
    cam = Camera(position=(0, 0, -3), look_at=(0, 0, 0), up=(0, 1, 0),
                 vertical_fov_deg=10, width=1, height=1)
    st = OracleSettings(mode=RenderMode.DIRECT_ONLY, background=WHITE)
    img = render_reference(Scene(objects=[obj]), cam, st)
    assert abs(float(img[0, 0, 0]) / np.exp(-10.0) - 1.0) < 1e-3


def test_shadow_clear_path_is_fully_transparent():
    scene = Scene(objects=[inst(HomogeneousSphereField(0.5, 5.0, WHITE), (0.0, 4.0, 0.0))],
                  lights=[KEY_LIGHT])
    tau = shadow_transmittance(scene, vec3(0, 0, 0), vec3(0, -4.0, 0), None,
                               RenderSettings(), Rng(0))
    assert tau == 1.0


def test_shadow_opaque_slab_blocks():
    slab = inst(HomogeneousBoxField((2.0, 2.0, 0.5), 1000.0, WHITE), (0.0, 0.0, 2.0))
    scene = Scene(objects=[slab], lights=[PointLight((0, 0, 6.0), WHITE)])
    tau = shadow_transmittance(scene, vec3(0, 0, 0), vec3(0, 0, 6.0), None,
                               RenderSettings(shadow_samples=64), Rng(0))
    assert tau < 1e-6


def test_shadow_sphere_attenuation_near_closed_form():
    # unit sphere, sigma=1, shadow ray through the center: tau ~ exp(-2)
    occ = inst(HomogeneousSphereField(1.0, 1.0, WHITE), (0.0, 0.0, 2.0))
    scene = Scene(objects=[occ], lights=[PointLight((0, 0, 6.0), WHITE)])
    vals = [shadow_transmittance(scene, vec3(0, 0, 0), vec3(0, 0, 6.0), None,
                                 RenderSettings(shadow_samples=192), Rng(s)) for s in range(4)]
    assert abs(np.mean(vals) / np.exp(-2.0) - 1.0) < 0.02


def test_shadow_excluded_object_does_not_occlude():
    occ = inst(HomogeneousSphereField(1.0, 50.0, WHITE), (0.0, 0.0, 2.0))
    scene = Scene(objects=[occ], lights=[PointLight((0, 0, 6.0), WHITE)])
    st = RenderSettings(shadow_samples=32)
    assert shadow_transmittance(scene, vec3(0, 0, 0), vec3(0, 0, 6.0), 0, st, Rng(0)) == 1.0
    assert shadow_transmittance(scene, vec3(0, 0, 0), vec3(0, 0, 6.0), None, st, Rng(0)) < 0.2


# ---------------------------------------------------------------------------
# shading pins
# ---------------------------------------------------------------------------


def test_direct_head_on_shell_returns_albedo_times_radiance():
    # opaque shell facing the light: cos factor 1, pixel = albedo * radiance
    shell = inst(LambertianShellField(0.8, 0.1, 400.0, (0.3, 0.6, 0.9)))
    scene = Scene(objects=[shell], lights=[PointLight((0, 0, -50.0), WHITE)])
    st = RenderSettings(mode=RenderMode.DIRECT_ONLY, samples_per_object=512)
    val = render_ray(scene, Ray(vec3(0, 0, -4), Z), st, Rng(5))
    assert np.allclose(val, [0.3, 0.6, 0.9], rtol=1e-12)


def test_direct_two_identical_lights_double_exactly():
    shell = inst(LambertianShellField(0.8, 0.1, 400.0, (0.3, 0.6, 0.9)))
    one = Scene(objects=[shell], lights=[PointLight((0, 0, -50.0), WHITE)])
    two = Scene(objects=[shell], lights=[PointLight((0, 0, -50.0), WHITE)] * 2)
    st = RenderSettings(mode=RenderMode.DIRECT_ONLY, samples_per_object=128)
    a = render_ray(one, Ray(vec3(0, 0, -4), Z), st, Rng(5))
    b = render_ray(two, Ray(vec3(0, 0, -4), Z), st, Rng(5))
    assert np.array_equal(b, 2.0 * a)


def test_radiance_scales_linearly_with_light_power():
    scene_1x = three_object_scene()
    scene_4x = Scene(objects=scene_1x.objects, lights=[PointLight((1.5, 5.0, -2.5), (4.0, 4.0, 4.0))])
    st = RenderSettings(mode=RenderMode.FULL, **SMALL_SETTINGS)
    ray = SMALL_CAM.ray_for_pixel(8, 9)
    a = render_ray(scene_1x, ray, st, Rng(1))
    b = render_ray(scene_4x, ray, st, Rng(1))
    # power-of-two scaling is exact in floating point
    assert np.array_equal(b, 4.0 * a)


def test_inverse_square_light_falloff():
    ball = inst(HomogeneousSphereField(0.5, 4.0, (0.8, 0.4, 0.2)))
    near = PointLight((0, 2.0, 0), WHITE, inverse_square=True)
    scene = Scene(objects=[ball], lights=[near])
    st = RenderSettings(mode=RenderMode.DIRECT_ONLY)
    val = direct_radiance(scene, vec3(0, 0, 0), 0, Z, st, Rng(0))
    assert np.allclose(val, np.array([0.8, 0.4, 0.2]) / 4.0, rtol=1e-12)


def test_indirect_single_direction_is_rho_times_secondary_radiance():
    wall = inst(HomogeneousBoxField((2.0, 2.0, 0.2), 800.0, (0.9, 0.9, 0.9)), (0, 0, 3.0))
    ball = inst(HomogeneousSphereField(0.5, 4.0, (1.0, 0.5, 0.25)))
    scene = Scene(objects=[ball, wall], lights=[PointLight((0, 0, -20.0), (2.0, 2.0, 2.0))])
    st = RenderSettings(mode=RenderMode.FULL, samples_per_object=256, max_bounces=2)
    x = vec3(0.0, 0.0, -0.2)
    got = indirect_radiance(scene, x, 0, Z, st, Rng(9), dirs_override=Z[None, :])
    # expected: scatter toward the wall times what a ray toward the wall sees
    sec = render_ray(scene, Ray(x + st.shadow_epsilon * Z, Z),
                     RenderSettings(mode=RenderMode.FULL, samples_per_object=256, max_bounces=1),
                     Rng(77))
    rho = ball.query(x, Z, Z).scatter
    assert np.allclose(got, rho * sec, rtol=1e-2)


def test_indirect_is_black_when_bounce_budget_spent():
    scene = three_object_scene()
    st = RenderSettings(mode=RenderMode.FULL, max_bounces=1)
    got = indirect_radiance(scene, vec3(0.62, 0.3, -0.05), 2, Z, st, Rng(0))
    assert np.array_equal(got, np.zeros(3))


def test_secondary_escape_ignores_background_color():
    # bounce rays that leave the scene contribute no radiance even when the
    # display background is bright
    ball = inst(HomogeneousSphereField(0.5, 4.0, WHITE))
    scene = Scene(objects=[ball], lights=[PointLight((0, 0, -20.0), WHITE)])
    st = RenderSettings(mode=RenderMode.FULL, indirect_dirs=16, background=(5.0, 5.0, 5.0))
    got = indirect_radiance(scene, vec3(0.6, 0, 0), 0, Z, st, Rng(4),
                            dirs_override=np.array([[1.0, 0.0, 0.0]]))
    assert np.array_equal(got, np.zeros(3))


def test_indirect_noise_shrinks_with_sqrt_of_direction_count():
    wall = inst(HomogeneousBoxField((2.0, 2.0, 0.2), 800.0, (0.9, 0.9, 0.9)), (0, 0, 3.0))
    ball = inst(HomogeneousSphereField(0.5, 4.0, (1.0, 0.5, 0.25)))
    scene = Scene(objects=[ball, wall], lights=[PointLight((0, 0, -20.0), (2.0, 2.0, 2.0))])
    x = vec3(0.0, 0.0, -0.2)

    def spread(k):
        st = RenderSettings(mode=RenderMode.FULL, samples_per_object=96, indirect_dirs=k)
        vals = np.array([indirect_radiance(scene, x, 0, Z, st, Rng(s)) for s in range(96)])
        return vals[:, 0].std()

    ratio = spread(16) / spread(8)
    assert 0.8 / np.sqrt(2.0) < ratio < 1.2 / np.sqrt(2.0)


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


def test_camera_center_pixel_looks_forward():
    cam = Camera(position=(0, 0, -5), look_at=(0, 0, 0), up=(0, 1, 0),
                 vertical_fov_deg=45, width=9, height=9)
    ray = cam.ray_for_pixel(4, 4)
    assert np.allclose(ray.direction, Z, atol=1e-12)


def test_camera_project_inverts_pixel_rays():
    cam = Camera(position=(1.0, 2.0, -4.0), look_at=(0, 0.5, 1.0), up=(0, 1, 0),
                 vertical_fov_deg=40, width=33, height=17)
    for ix, iy in [(0, 0), (16, 8), (32, 16), (5, 11)]:
        p = cam.ray_for_pixel(ix, iy).at(3.0)
        got = cam.project(p)
        assert got is not None
        assert np.allclose(got, (ix, iy), atol=1e-9)
    assert cam.project(cam.position - 2.0 * cam.basis[0]) is None


def test_camera_matrix_rays_match_camera():
    cam = Camera(position=(0.5, 1.0, -3.0), look_at=(0, 0, 0), up=(0, 1, 0),
                 vertical_fov_deg=50, width=8, height=6)
    origins, dirs = rays_from_camera_matrix(cam.camera_to_world(), 50, 8, 6)
    ix = np.arange(48) % 8
    iy = np.arange(48) // 8
    assert np.allclose(origins, cam.position[None, :])
    assert np.allclose(dirs, cam.dirs_for_pixels(ix, iy), atol=1e-12)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(position=(0, 0, -1), look_at=(0, 0, 0), up=(0, 0, 1),
               vertical_fov_deg=45, width=4, height=4)
    with pytest.raises(ValueError):
        Camera(position=(0, 0, -1), look_at=(0, 0, 0), up=(0, 1, 0),
               vertical_fov_deg=0.0, width=4, height=4)


# ---------------------------------------------------------------------------
# environment map
# ---------------------------------------------------------------------------


def _axis_grid():
    # rows 3 x cols 4, distinct color per cell
    g = np.zeros((3, 4, 3))
    g[:, :, 0] = np.arange(3)[:, None]  # red encodes row
    g[:, :, 1] = np.arange(4)[None, :]  # green encodes column
    return g


def test_environment_pole_and_equator_conventions():
    env = EnvironmentMap(_axis_grid())
    assert np.allclose(env.radiance(vec3(0, 0, 1))[0], 0.0)   # +z is the top row
    assert np.allclose(env.radiance(vec3(0, 0, -1))[0], 2.0)  # -z is the bottom row
    eq_x = env.radiance(vec3(1, 0, 0))
    assert np.allclose(eq_x, [1.0, 0.0, 0.0])                  # +x is column 0
    eq_y = env.radiance(vec3(0, 1, 0))
    assert np.allclose(eq_y, [1.0, 1.0, 0.0])                  # +y is column 1


def test_environment_phi_wraps_between_last_and_first_column():
    env = EnvironmentMap(_axis_grid())
    d = vec3(np.cos(7 * np.pi / 4), np.sin(7 * np.pi / 4), 0.0)
    got = env.radiance(d)
    # halfway between column 3 and column 0
    assert np.allclose(got[1], 1.5)


def test_environment_single_row_and_scale():
    env = EnvironmentMap(np.full((1, 2, 3), 0.25), scale=4.0)
    assert np.allclose(env.radiance(vec3(0, 0, 1)), [1.0, 1.0, 1.0])
    batch = env.radiance_many(np.array([[0, 0, 1.0], [1.0, 0, 0]]))
    assert batch.shape == (2, 3)
    assert np.allclose(environment_radiance(env, vec3(1, 0, 0)), [1.0, 1.0, 1.0])


def test_environment_validation():
    with pytest.raises(ValueError):
        EnvironmentMap(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        EnvironmentMap(-np.ones((2, 2, 3)))
    with pytest.raises(ValueError):
        EnvironmentMap(np.ones((2, 2, 3)), scale=-1.0)


def test_escape_sees_background_or_environment():
    cam = Camera(position=(0, 0, -3), look_at=(0, 0, 0), up=(0, 1, 0),
                 vertical_fov_deg=10, width=1, height=1)
    st = RenderSettings(mode=RenderMode.DIRECT_ONLY, background=(0.1, 0.2, 0.3))
    img, _ = render_image(Scene(objects=[]), cam, st, seed=0)
    assert np.allclose(img[0, 0], [0.1, 0.2, 0.3])
    env = EnvironmentMap(np.full((1, 1, 3), 0.7))
    img2, _ = render_image(Scene(objects=[], environment=env), cam, st, seed=0)
    assert np.allclose(img2[0, 0], [0.7, 0.7, 0.7])


def test_green_environment_tints_the_scene():
    scene = three_object_scene()
    green = EnvironmentMap(np.tile(np.array([0.0, 0.6, 0.0]), (2, 4, 1)))
    lit = Scene(objects=scene.objects, lights=scene.lights, environment=green)
    st = RenderSettings(mode=RenderMode.FULL, **SMALL_SETTINGS)
    base, _ = render_image(scene, SMALL_CAM, st, seed=7)
    tinted, _ = render_image(lit, SMALL_CAM, st, seed=7)
    eps = 1e-9
    ratio_base = (base[..., 1].mean() + eps) / (base[..., 0].mean() + eps)
    ratio_tint = (tinted[..., 1].mean() + eps) / (tinted[..., 0].mean() + eps)
    assert ratio_tint > ratio_base


# ---------------------------------------------------------------------------
# whole-image properties
# ---------------------------------------------------------------------------


def test_single_pixel_image_equals_render_ray():
    cam = Camera(position=(0, 1.6, -4.0), look_at=(0, 0.05, 0), up=(0, 1, 0),
                 vertical_fov_deg=38, width=1, height=1)
    scene = three_object_scene()
    st = RenderSettings(mode=RenderMode.FULL, **SMALL_SETTINGS)
    img, _ = render_image(scene, cam, st, seed=12)
    root = Rng(12)
    ray_rng = root.derive(11, 0, 0)  # pixel stream tag, pixel 0, sample 0
    assert np.array_equal(img[0, 0], render_ray(scene, cam.ray_for_pixel(0, 0), st, ray_rng))


def test_render_is_deterministic_for_a_seed(mode_renders):
    scene = three_object_scene()
    st = RenderSettings(mode=RenderMode.FULL, **SMALL_SETTINGS)
    img, stats = mode_renders[RenderMode.FULL]
    again, stats2 = render_image(scene, SMALL_CAM, st, seed=7)
    assert np.array_equal(img, again)
    assert np.array_equal(stats, stats2)
    other, _ = render_image(scene, SMALL_CAM, st, seed=8)
    assert not np.array_equal(img, other)


def test_thread_count_never_changes_bytes(mode_renders):
    scene = three_object_scene()
    st = RenderSettings(mode=RenderMode.FULL, **SMALL_SETTINGS)
    img, stats = mode_renders[RenderMode.FULL]
    threaded, tstats = render_image(scene, SMALL_CAM, st, seed=7, threads=3)
    assert np.array_equal(img, threaded)
    assert np.array_equal(stats, tstats)


@pytest.mark.parametrize("order", [(1, 0, 2), (2, 1, 0)])
def test_object_order_never_changes_bytes(order, mode_renders):
    st = RenderSettings(mode=RenderMode.FULL, **SMALL_SETTINGS)
    img, _ = mode_renders[RenderMode.FULL]
    permuted, _ = render_image(three_object_scene(order), SMALL_CAM, st, seed=7)
    assert np.array_equal(img, permuted)


def test_modes_sum_exactly_over_black_background(mode_renders):
    full, _ = mode_renders[RenderMode.FULL]
    ds, _ = mode_renders[RenderMode.DIRECT_SHADOWS]
    ind, _ = mode_renders[RenderMode.INDIRECT_ONLY]
    assert np.array_equal(full, ds + ind)


def test_mode_orderings_hold_everywhere(mode_renders):
    do, _ = mode_renders[RenderMode.DIRECT_ONLY]
    ds, _ = mode_renders[RenderMode.DIRECT_SHADOWS]
    full, _ = mode_renders[RenderMode.FULL]
    assert np.all(ds <= do)
    assert np.all(full >= ds)
    assert ds.min() >= 0.0 and np.isfinite(full).all()


def test_pixel_samples_average_jittered_rays():
    scene = three_object_scene()
    st = RenderSettings(mode=RenderMode.DIRECT_ONLY, samples_per_object=32, pixel_samples=4)
    img, stats = render_image(scene, SMALL_CAM, st, seed=3)
    assert np.array_equal(stats, np.full((16, 16), 4))
    st1 = RenderSettings(mode=RenderMode.DIRECT_ONLY, samples_per_object=32)
    img1, _ = render_image(scene, SMALL_CAM, st1, seed=3)
    assert not np.array_equal(img, img1)


# ---------------------------------------------------------------------------
# deterministic reference
# ---------------------------------------------------------------------------


def test_oracle_rejects_low_sample_floors():
    with pytest.raises(ValueError):
        OracleSettings(samples_per_object=1024)
    with pytest.raises(ValueError):
        OracleSettings(indirect_dirs=64)


def test_direct_render_matches_oracle_closely():
    sph = inst(HomogeneousSphereField(0.6, 5.0, (0.8, 0.4, 0.2)))
    scene = Scene(objects=[sph], lights=[PointLight((2.0, 3.0, -4.0), WHITE)])
    cam = Camera(position=(0, 0, -3.0), look_at=(0, 0, 0), up=(0, 1, 0),
                 vertical_fov_deg=30, width=32, height=32)
    mc, _ = render_image(scene, cam, RenderSettings(mode=RenderMode.DIRECT_ONLY), seed=3)
    ref = render_reference(scene, cam, OracleSettings(mode=RenderMode.DIRECT_ONLY))
    assert np.abs(mc - ref).mean() < 0.01


def test_shadowed_render_matches_oracle_above_30db():
    sph = inst(HomogeneousSphereField(0.6, 5.0, (0.8, 0.4, 0.2)))
    blocker = inst(HomogeneousSphereField(0.25, 8.0, (0.2, 0.8, 0.3)), (0.5, 0.5, -1.4))
    scene = Scene(objects=[sph, blocker], lights=[PointLight((2.0, 3.0, -4.0), WHITE)])
    cam = Camera(position=(0, 0, -3.0), look_at=(0, 0, 0), up=(0, 1, 0),
                 vertical_fov_deg=30, width=64, height=64)
    st = RenderSettings(mode=RenderMode.DIRECT_SHADOWS, shadow_samples=16)
    mc, _ = render_image(scene, cam, st, seed=3)
    ref = render_reference(scene, cam, OracleSettings(mode=RenderMode.DIRECT_SHADOWS))
    psnr = 10.0 * np.log10(1.0 / ((mc - ref) ** 2).mean())
    assert psnr > 30.0


def test_oracle_self_convergence_under_sample_doubling():
    shell = inst(LambertianShellField(0.5, 0.1, 10.0, (0.4, 0.7, 0.3)))
    scene = Scene(objects=[shell], lights=[PointLight((2.0, 3.0, -4.0), WHITE)])
    cam = Camera(position=(0, 0.4, -2.2), look_at=(0, 0, 0), up=(0, 1, 0),
                 vertical_fov_deg=30, width=16, height=16)
    lo = render_reference(scene, cam, OracleSettings(mode=RenderMode.DIRECT_SHADOWS))
    hi = render_reference(scene, cam,
                          OracleSettings(mode=RenderMode.DIRECT_SHADOWS, samples_per_object=8192))
    assert np.abs(lo - hi).mean() < 0.002


def test_oracle_is_deterministic():
    sph = inst(HomogeneousSphereField(0.6, 5.0, (0.8, 0.4, 0.2)))
    scene = Scene(objects=[sph], lights=[KEY_LIGHT])
    cam = Camera(position=(0, 0, -3.0), look_at=(0, 0, 0), up=(0, 1, 0),
                 vertical_fov_deg=30, width=8, height=8)
    st = OracleSettings(mode=RenderMode.DIRECT_SHADOWS)
    assert np.array_equal(render_reference(scene, cam, st), render_reference(scene, cam, st))


# ---------------------------------------------------------------------------
# settings validation
# ---------------------------------------------------------------------------


def test_render_settings_validation():
    with pytest.raises(ValueError):
        RenderSettings(samples_per_object=0)
    with pytest.raises(ValueError):
        RenderSettings(max_bounces=0)
    with pytest.raises(ValueError):
        RenderSettings(shadow_epsilon=0.0)
    with pytest.raises(ValueError):
        PointLight((0, 0, 0), (-1.0, 0, 0))
    assert RenderSettings(shadow_samples=None).effective_shadow_samples == 192
    assert RenderSettings(shadow_samples=16).effective_shadow_samples == 16


def test_mode_accepts_string_names():
    st = RenderSettings(mode="direct_only")
    assert st.mode is RenderMode.DIRECT_ONLY
