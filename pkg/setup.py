#!/usr/bin/env python
# Licensed under a 3-clause BSD style license - see LICENSE.rst

import os
import subprocess
from configparser import ConfigParser

from setuptools import find_packages, setup

from dlab_version import RELEASE, VERSION

# Get some values from the setup.cfg
conf = ConfigParser()
conf.read(['setup.cfg'])
metadata = dict(conf.items('metadata'))

PACKAGENAME = metadata.get('package_name', 'dlab')
DESCRIPTION = metadata.get('description', '')
AUTHOR = metadata.get('author', '')
AUTHOR_EMAIL = metadata.get('author_email', '')
LICENSE = metadata.get('license', 'unknown')
URL = metadata.get('url', '')

LONG_DESCRIPTION = open('README.rst').read()


def _git_hash():
    try:
        output = subprocess.check_output(['git', 'rev-parse', 'HEAD'],
                                         stderr=subprocess.DEVNULL)
    except (OSError, subprocess.CalledProcessError):
        return ''
    return output.decode('ascii').strip()


def write_version_py():
    '''Freeze build information in <package>/version.py'''
    githash = '' if RELEASE else _git_hash()
    with open(os.path.join(PACKAGENAME, 'version.py'), 'w') as out:
        out.write("version = '{0}'\n".format(VERSION))
        out.write("githash = '{0}'\n".format(githash))


write_version_py()

# Define entry points for command-line scripts
entry_points = {'console_scripts': ['{0} = {1}'.format(name, target)
                                    for name, target in conf.items('entry_points')]}

with open('requirements.txt') as infile:
    requirements = [line.strip() for line in infile
                    if line.strip() and not line.startswith('pytest')]

setup(name=PACKAGENAME,
      version=VERSION,
      description=DESCRIPTION,
      packages=find_packages(include=[PACKAGENAME, PACKAGENAME + '.*']),
      install_requires=requirements,
      extras_require={'test': ['pytest>=7.0', 'pytest-cov'],
                      'docs': ['sphinx-astropy']},
      author=AUTHOR,
      author_email=AUTHOR_EMAIL,
      license=LICENSE,
      url=URL,
      long_description=LONG_DESCRIPTION,
      classifiers=[
          'Development Status :: 3 - Alpha',
          'Intended Audience :: Science/Research',
          'License :: OSI Approved :: MIT License',
          'Operating System :: OS Independent',
          'Programming Language :: Python',
          'Programming Language :: Python :: 3',
          'Programming Language :: Python :: 3.9',
          'Programming Language :: Python :: 3.10',
          'Programming Language :: Python :: 3.11',
          'Topic :: Scientific/Engineering :: Artificial Intelligence',
          'Topic :: Scientific/Engineering :: Image Processing',
      ],
      python_requires='>=3.9',
      zip_safe=False,
      entry_points=entry_points,
      )
