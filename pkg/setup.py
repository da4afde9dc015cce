from setuptools import find_packages, setup

setup(
    name="midi_accompanist",
    version="0.1",
    description="Real-time automatic accompaniment for MIDI duets: score following, tempo models and accompaniment rendering",
    license="MIT",
    install_requires=[
        "click",
        "python-dotenv",
        "mido",
        "python-rtmidi",
        "numpy",
    ],
    packages=find_packages(),
    include_package_data=True,
    entry_points={
        "console_scripts": [
            "accompanist = midi_accompanist.bin.accompanist:main",
        ]
    },
    zip_safe=False,
)
