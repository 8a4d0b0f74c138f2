from setuptools import setup, find_packages

# Pure Python implementation - numpy/scipy do the heavy lifting

setup(
    name='psfa',
    version='1.0.0',
    description='Group-level probabilistic sparse factor analysis via variational Bayes',
    long_description=open('README.md', encoding='utf-8').read(),
    long_description_content_type='text/markdown',
    author='psfa Development Team',
    packages=find_packages(exclude=('testing_examples', 'examples', 'examples.*')),


    install_requires=[
        'numpy>=1.19.0',
        'scipy>=1.6.0',
        'tqdm>=4.50.0'
    ],
    python_requires='>=3.8',
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Topic :: Scientific/Engineering :: Mathematics',
        'Topic :: Scientific/Engineering :: Medical Science Apps.'
    ],
    keywords='factor analysis, variational Bayes, sparsity, ARD, fMRI, blind source separation',
    entry_points={
        'console_scripts': [
            'psfa=psfa:cli',
        ],
    },
)
