from setuptools import setup, find_packages

setup(
    name='pyLoRAOver',
    version='0.1.0',
    description='Over-parameterized low-rank adapters with matrix product operator factors',
    long_description=open('README.md', encoding='utf-8').read(),
    long_description_content_type='text/markdown',
    license='GPLv3',
    packages=find_packages(exclude=['tests', 'examples', 'examples.*']),
    package_data={'pyLoRAOver': ['run_config.schema.json']},
    python_requires='>=3.9',
    install_requires=['numpy>=1.26', 'scipy>=1.12', 'icecream>=2.1', 'tqdm>=4.66'],
    extras_require={'test': ['pytest>=8.0']},
    entry_points={'console_scripts': ['lora-over=pyLoRAOver.command:main']},
)
