import numpy as np
import pytest

from biot_design.homogenization.tensors import (HomCoefficients,
                                                isotropic_stiffness)
from biot_design.macro.biot_darcy import (MacroCoefficients, MacroData,
                                          assemble_system, boundary_flux,
                                          box_mesh, compliance,
                                          element_tensors, export_fields,
                                          flux_functional,
                                          harmonic_lift_tilde_p, lagrangian,
                                          lambda_sweep, local_objective_F_e,
                                          solve_adjoint, solve_state)
from biot_design.resources.basics import MeshException

ELEMENT = 151


@pytest.fixture(scope="module")
def mesh():
    return box_mesh()


@pytest.fixture(scope="module")
def unit_darcy():
    return HomCoefficients(A=isotropic_stiffness(10.0, 0.3), C=0.01 * np.eye(3), N=0.05, K=np.eye(3), phi=0.02)


@pytest.fixture(scope="module")
def solved(mesh, synthetic_coefficients):
    system = assemble_system(mesh, MacroCoefficients.uniform(synthetic_coefficients, mesh.n_elements), MacroData())
    return system, solve_state(system)


def test_flux_of_uniform_permeability(mesh, unit_darcy):
    system = assemble_system(mesh, MacroCoefficients.uniform(unit_darcy, mesh.n_elements), MacroData())
    state = solve_state(system)
    # linear pressure drop 0.5 over a length of 15 through a 10 x 2 outlet
    assert flux_functional(system, state) == pytest.approx(2.0 / 3.0, rel=1e-8)
    assert boundary_flux(system, state) == pytest.approx(2.0 / 3.0, rel=1e-8)
    assert state.residuals["darcy"] < 1e-12
    assert state.residuals["elasticity"] < 1e-10


def test_pressure_does_not_see_the_traction(mesh, synthetic_coefficients):
    coefficients = MacroCoefficients.uniform(synthetic_coefficients, mesh.n_elements)
    first = solve_state(assemble_system(mesh, coefficients, MacroData()))
    second = solve_state(assemble_system(mesh, coefficients, MacroData(traction=(0.3, -2.0, 0.1))))
    np.testing.assert_array_equal(first.p, second.p)
    assert not np.allclose(first.u, second.u)


def test_adjoint_without_traction(mesh, synthetic_coefficients):
    system = assemble_system(
        mesh, MacroCoefficients.uniform(synthetic_coefficients, mesh.n_elements), MacroData(traction=(0.0, 0.0, 0.0))
    )
    adjoint = solve_adjoint(system, solve_state(system), -10.0)
    np.testing.assert_array_equal(adjoint.v_tilde, 0.0)
    np.testing.assert_array_equal(adjoint.q_tilde, -10.0 * adjoint.q_tilde_p)


def test_adjoint_without_flux_multiplier(solved):
    system, state = solved
    adjoint = solve_adjoint(system, state, 0.0)
    np.testing.assert_array_equal(adjoint.q_tilde, adjoint.q_tilde_v)
    assert np.abs(adjoint.v_tilde).max() > 0.0


@pytest.mark.parametrize("lam", [0.0, -1.0, 1.0, -100.0])
def test_local_objectives_sum_to_the_reduced_functional(solved, synthetic_coefficients, lam):
    system, state = solved
    adjoint = solve_adjoint(system, state, lam)
    tensors = element_tensors(system, state, adjoint, np.arange(system.mesh.n_elements))
    terms = tensors.terms(synthetic_coefficients)
    expected = system.load @ adjoint.v_tilde.ravel() + lam * flux_functional(system, state)
    scale = sum(abs(t) for t in terms.values())
    assert tensors.value(synthetic_coefficients) == pytest.approx(expected, rel=1e-9, abs=1e-12 * scale)
    v = adjoint.v_tilde.ravel()
    # g(v_tilde) = -a(v_tilde, v_tilde)
    assert system.load @ v < 0.0
    # g(v_tilde) = -Phi(u) - b(P, v_tilde)
    expected = -(compliance(system, state) + v @ (system.coupling @ state.P))
    assert system.load @ v == pytest.approx(expected, rel=1e-9)


def test_without_pressure_the_adjoint_is_the_negated_state(mesh, synthetic_coefficients):
    data = MacroData(pressure_1=0.0, pressure_2=0.0)
    system = assemble_system(mesh, MacroCoefficients.uniform(synthetic_coefficients, mesh.n_elements), data)
    state = solve_state(system)
    adjoint = solve_adjoint(system, state, -1.0)
    np.testing.assert_allclose(adjoint.v_tilde, -state.u, atol=1e-12 * np.abs(state.u).max())
    tensors = element_tensors(system, state, adjoint, np.arange(mesh.n_elements))
    assert tensors.value(synthetic_coefficients) == pytest.approx(-compliance(system, state), rel=1e-9)


@pytest.mark.parametrize("lam", [-1.0, -100.0])
def test_lagrangian_at_the_solution(solved, lam):
    system, state = solved
    adjoint = solve_adjoint(system, state, lam)
    expected = compliance(system, state) + lam * (flux_functional(system, state) - system.data.target_flux)
    assert lagrangian(system, state, adjoint) == pytest.approx(expected, rel=1e-9)


def test_outflow_lift_choice(solved, synthetic_coefficients):
    system, state = solved
    mesh = system.mesh
    harmonic = harmonic_lift_tilde_p(mesh)
    first = solve_adjoint(system, state, -100.0)
    second = solve_adjoint(system, state, -100.0, p_tilde=harmonic)
    assert flux_functional(system, state, harmonic) == pytest.approx(flux_functional(system, state), rel=1e-9)
    assert lagrangian(system, state, second) == pytest.approx(lagrangian(system, state, first), rel=1e-9)

    def local(adjoint):
        return np.array(
            [element_tensors(system, state, adjoint, [e]).value(synthetic_coefficients) for e in range(mesh.n_elements)]
        )

    values = local(first)
    np.testing.assert_allclose(local(second), values, atol=1e-10 * np.abs(values).max())
    # the split between the permeability terms does depend on the lift
    outlet = 290
    terms = element_tensors(system, state, first, [outlet]).terms(synthetic_coefficients)
    other = element_tensors(system, state, second, [outlet]).terms(synthetic_coefficients)
    assert terms["flux_lift"] != pytest.approx(other["flux_lift"])


def _perturbed(base: MacroCoefficients, name: str, direction: np.ndarray, step: float) -> MacroCoefficients:
    tensors = {"A": base.A.copy(), "B": base.B.copy(), "K_eff": base.K_eff.copy()}
    tensors[name][ELEMENT] += step * direction
    return MacroCoefficients(**tensors)


@pytest.mark.parametrize("lam", [-1.0, 1.0, -100.0])
@pytest.mark.parametrize("name", ["A", "B", "K_eff"])
def test_coefficient_derivatives(mesh, synthetic_coefficients, name, lam):
    base = MacroCoefficients.uniform(synthetic_coefficients, mesh.n_elements)
    direction = {
        "A": np.eye(6)[[1, 0, 2, 3, 4, 5]] - np.diag([0.0, 0.0, 1.0, 1.0, 1.0, 1.0]),
        "B": np.diag([1.0, 0.0, 0.0]),
        "K_eff": np.array([[1.0, 0.5, 0.0], [0.5, 0.0, 0.0], [0.0, 0.0, 0.0]]),
    }[name]

    def reduced(coefficients):
        system = assemble_system(mesh, coefficients, MacroData())
        state = solve_state(system)
        return compliance(system, state) + lam * flux_functional(system, state)

    step = 1e-3 * np.abs(getattr(base, name)[ELEMENT]).max()
    fd = (reduced(_perturbed(base, name, direction, step)) - reduced(_perturbed(base, name, direction, -step))) / (2.0 * step)

    system = assemble_system(mesh, base, MacroData())
    state = solve_state(system)
    tensors = element_tensors(system, state, solve_adjoint(system, state, lam), [ELEMENT])
    stacks = {"A": np.zeros((1, 6, 6)), "B": np.zeros((1, 3, 3)), "K_eff": np.zeros((1, 3, 3))}
    stacks[name] = direction[None]
    analytic = tensors.gradient(stacks["A"], stacks["B"], stacks["K_eff"], 1.0)[0]
    assert analytic == pytest.approx(fd, rel=1e-6, abs=1e-12)


def test_zero_data_gives_zero_objective(mesh, synthetic_coefficients):
    data = MacroData(pressure_1=0.0, pressure_2=0.0, traction=(0.0, 0.0, 0.0))
    system = assemble_system(mesh, MacroCoefficients.uniform(synthetic_coefficients, mesh.n_elements), data)
    state = solve_state(system)
    adjoint = solve_adjoint(system, state, -100.0)
    value, grad = local_objective_F_e(system, state, adjoint, [ELEMENT], synthetic_coefficients)
    assert value == 0.0
    assert grad is None


def test_empty_element_set(solved):
    system, state = solved
    with pytest.raises(ValueError):
        element_tensors(system, state, solve_adjoint(system, state, -1.0), [])


@pytest.mark.parametrize(
    "kwargs",
    [
        {"pressure_2": ("ymax",)},
        {"dirichlet": ()},
        {"dirichlet": ("ymin", "ymax")},
        {"pressure_1": ()},
    ],
)
def test_invalid_boundary_tags(kwargs):
    with pytest.raises(MeshException):
        box_mesh(**kwargs)


def test_invalid_box():
    with pytest.raises(ValueError):
        box_mesh(shape=(0, 2, 2))


def test_export_fields(solved, tmp_path):
    system, state = solved
    path = tmp_path / "macro.vtk"
    export_fields(system, state, solve_adjoint(system, state, -1.0), str(path))
    text = path.read_text()
    assert "v_tilde" in text and "p_bar" in text


def test_lambda_sweep(solved, synthetic_coefficients):
    system, state = solved
    table = lambda_sweep(system, state, synthetic_coefficients, [-1.0, -100.0])
    assert len(table) == 2 * system.mesh.n_elements
    np.testing.assert_allclose(
        table["F_e"], table[["stiffness", "coupling", "adjoint_permeability", "flux_lift"]].sum(axis=1), rtol=1e-12
    )
    share = table.groupby("lam")["permeability_share"].mean()
    assert share[-100.0] > share[-1.0]
    assert table["permeability_share"].between(0.0, 1.0).all()
