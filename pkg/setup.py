import sys
try:
    from setuptools import setup
except ImportError:
    from distutils.core import setup

if sys.version_info[:2] < (3, 8):
    msg = ("LatentPrefPython requires Python 3.8 or later. "
           "You are using version %s.  Please "
           "install using a supported version." % sys.version)
    sys.stderr.write(msg)
    sys.exit(1)

CLASSIFIERS = [
    'Development Status :: 3 - Alpha',
    'Environment :: Console',
    'Intended Audience :: Science/Research',
    'License :: OSI Approved :: MIT License',
    'Operating System :: OS Independent',
    'Programming Language :: Python',
    'Programming Language :: Python :: 3',
    'Programming Language :: Python :: 3.8',
    'Programming Language :: Python :: 3.9',
    'Programming Language :: Python :: 3.10',
    'Programming Language :: Python :: 3.11',
    'Programming Language :: Python :: 3.12',
    'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ]

setup(name='LatentPrefPython',
      version='1.0.0',
      description='Latent reward models and step-level preference optimization for a desk-scale diffusion model.',
      license='MIT X11',
      classifiers=CLASSIFIERS,
      package_dir = {'': 'src'},
      py_modules=['LatentPrefPython', 'tensor', 'diffusion', 'denoiser', 'lrm', 'mpcf', 'lpo', 'Checkpoint', 'harness'],
      python_requires='>=3.8',
      install_requires=['numpy>=1.20'],
      extras_require={'tests': ['pytest', 'scipy']},
      entry_points={'console_scripts': ['latentpref = harness:main']}
      )
