#!/usr/bin/env python3
"""
Simple system verification script
"""

import json
import requests
from dotenv import load_dotenv

load_dotenv()

SOLVER_URL = "http://localhost:8101"
HIFI_URL = "http://localhost:8102"
SAMPLE_MODEL = "sample_models/bifurcation.json"


def verify_system():
    """Verify the services are up and a sample model simulates"""
    print('🔍 0D Calibration System Verification')
    print('=' * 50)

    services = [
        ('Solver Service', f'{SOLVER_URL}/health'),
        ('High-Fidelity Service', f'{HIFI_URL}/health'),
    ]

    print('🏥 Checking Service Health:')
    all_healthy = True
    for name, url in services:
        try:
            response = requests.get(url, timeout=3)
            if response.status_code == 200:
                print(f'   ✅ {name}: Healthy')
                model_path = response.json().get('model_path')
                if model_path:
                    print(f'      📊 Surrogate model: {model_path}')
            else:
                print(f'   ❌ {name}: Status {response.status_code}')
                all_healthy = False
        except requests.RequestException:
            print(f'   ❌ {name}: Not responding')
            all_healthy = False

    if not all_healthy:
        print('\n⚠️ Some services are not running. Start with: python run_services.py')
        return False

    with open(SAMPLE_MODEL) as f:
        model = json.load(f)

    print('\n🧪 Testing Simulation:')
    simulated = None
    try:
        response = requests.post(f'{SOLVER_URL}/simulate', json={
            'model': model,
            'integrator': {'steps_per_cycle': 200},
        }, timeout=120)
        if response.status_code == 200:
            simulated = response.json()
            traj = simulated['trajectory']
            p_in = [row[0] for row in traj['rows']]
            print(f'   📊 Cycles: {simulated["cycles"]}, periodic: {simulated["periodic"]}')
            print(f'   📊 Inlet pressure: {min(p_in):.1f} to {max(p_in):.1f} dyn/cm^2')
            print('   ✅ Simulation working')
        else:
            print(f'   ❌ Simulation failed: {response.status_code} {response.text[:200]}')
    except requests.RequestException as e:
        print(f'   ❌ Simulation error: {e}')

    print('\n🧪 Testing High-Fidelity Hand-off:')
    try:
        wk = model['boundary_conditions']['windkessels']
        response = requests.post(f'{HIFI_URL}/evaluate', json={
            'model': model['name'],
            'theta': [0.0] * len(wk),
            'windkessels': wk,
            'inflow': model['boundary_conditions']['inflow'],
            'columns': simulated['trajectory']['columns'] if simulated else [],
        }, timeout=120)
        if response.status_code == 200:
            lines = response.json()['csv'].splitlines()
            print(f'   📊 Response: {len(lines) - 1} time points')
            print('   ✅ Hand-off evaluation working')
        else:
            print(f'   ❌ Hand-off failed: {response.status_code} {response.text[:200]}')
    except requests.RequestException as e:
        print(f'   ❌ Hand-off error: {e}')

    print('\n' + '=' * 50)
    print('🎉 System Verification Complete!')
    print('=' * 50)
    return True


if __name__ == "__main__":
    verify_system()
